"""Validate legal answer candidates by few-shot prompting a chat model.

Corpus ingestion, binary/multi-choice task conversion, prompt assembly,
provider dispatch with caching, rule-based label correction, and scoring.
"""

__version__ = "0.1.0"
