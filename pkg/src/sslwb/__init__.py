"""sslwb: a small workbench for self-supervised pretraining and finetuning of image classifiers."""

__version__ = "0.1.0"
