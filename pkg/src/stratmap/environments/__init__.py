"""Text environments, their ground-truth oracles and scripted agents."""
