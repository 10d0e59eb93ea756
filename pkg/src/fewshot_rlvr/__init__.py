"""Few-shot RL with verifiable rewards on a synthetic vision-language task family."""

__version__ = "0.1.0"
