"""Train and evaluate acoustic word embeddings on word discrimination and
phonological similarity."""

__version__ = "0.1.0"
