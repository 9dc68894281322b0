"""Reserved token ids shared by every task and model."""

PAD = 0
BOS = 1
EOS = 2
LENGTH = 3
MASK = 4
BLANK = 5
RESERVED = 6

SPECIAL_NAMES = {PAD: "PAD", BOS: "BOS", EOS: "EOS", LENGTH: "LENGTH", MASK: "MASK", BLANK: "BLANK"}
