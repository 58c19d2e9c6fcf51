"""Request-level intrusion attribution and recovery for web applications."""

__version__ = "0.1.0"
