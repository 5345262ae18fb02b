"""Prompt templates (string.Template text assets)."""
