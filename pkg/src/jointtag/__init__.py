"""Joint clinical entity and attribute tagging with BiLSTM-CRF variants."""

__version__ = "0.1.0"
