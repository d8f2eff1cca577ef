"""Reverse-mode autodiff tape, encoders, transformer, and fast runtime."""
