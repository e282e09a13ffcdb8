"""Multi-agent tracking by configuration-matched fragments joined with an
online appearance classifier, plus a synthetic hive benchmark."""

__version__ = "0.1.0"
