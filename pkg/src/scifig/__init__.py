"""Figure-caption-context triplet curation pipeline.

Turns parsed scientific document layouts into dataset-ready triplets:
extraction and sanitization, quality filtering with perceptual-hash
dedup, policy-routed recaptioning with QA regeneration, and caption
quality evaluation. Exposed as a FastAPI service with a thin CLI client.
"""

__version__ = "0.1.0"
