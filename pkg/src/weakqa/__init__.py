"""Weakly-supervised open-domain QA: dense retriever + reader trained by hard EM."""

__version__ = "0.1.0"
