"""Attention-behavior fine-tuning on a toy transformer, with the analyses around it."""
