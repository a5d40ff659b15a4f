# TALLY: balanced feature augmentation for multi-domain long-tailed classification
__version__ = "1.0.0"
