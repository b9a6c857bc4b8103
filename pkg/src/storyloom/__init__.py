"""Toy-scale multimodal storytelling: style-consistent image generation, a joint
generation/prediction storyteller, LLM-driven story enhancement, and
pairwise human-evaluation statistics."""

__version__ = "0.1.0"
