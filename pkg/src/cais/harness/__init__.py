"""Synthetic stereo data, fixed features, losses, optimizer and toy training."""
