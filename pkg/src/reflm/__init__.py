"""Reference-aware language models: mixture models that decide, per token,
whether to generate from a vocabulary softmax or to refer to an ingredient
list, a database table, or previously mentioned entities."""

__version__ = "0.1.0"
