"""Structural tokens shared by the corpus, tokenizer and predictor."""

CELL = "<|cell|>"
END_OF_COMMENT = "<|endofcomment|>"
END_OF_TEXT = "<|endoftext|>"
INDENT = "<|4space|>"

ALL = (END_OF_TEXT, CELL, END_OF_COMMENT, INDENT)
