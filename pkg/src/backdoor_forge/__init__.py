"""Object-detection backdoor implanting and detection-aware adversarial fine-tuning."""

__version__ = "0.1.0"
