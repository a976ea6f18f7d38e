"""Desk-scale toolkit for studying how pre-training-data properties affect
masked-LM fine-tunability: synthetic corpus generators, a small trainable
encoder, embedding surgery, and a config-driven pretrain/align/finetune
pipeline."""

__version__ = "0.1.0"
