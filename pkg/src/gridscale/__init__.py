"""Power-system QA dataset synthesis, float tokenization, task scoring and
data-scaling fits."""

__version__ = "0.1.0"
