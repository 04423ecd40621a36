"""Counting model, VQA attention adapters and the captioning model."""
