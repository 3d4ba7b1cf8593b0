"""Guided visual-detail completion for a toy multimodal decoder."""
