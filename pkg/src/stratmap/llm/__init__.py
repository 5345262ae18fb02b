"""Language-model gateway: client, parsing, prompt-backed and offline proposers."""
