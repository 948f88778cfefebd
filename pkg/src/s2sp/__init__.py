"""Seq2seq training lab: LM pretraining, weight transfer, joint fine-tuning."""

__version__ = "0.1.0"
