"""microvlm: a desk-scale multimodal chat model you can train, probe, and serve.

The package is a small numpy library organized as a pipeline:

- :mod:`microvlm.tensor` / :mod:`microvlm.optim` - float64 autodiff kernel and Adam
- :mod:`microvlm.tokenizer` - byte-level vocabulary and chat templating
- :mod:`microvlm.images` - binary PPM decode and normalization
- :mod:`microvlm.model` - vision encoder, connector, decoder LM, generation
- :mod:`microvlm.datagen` - deterministic synthetic glyph corpus
- :mod:`microvlm.training` - staged tuning with freeze masks and checkpoints
- :mod:`microvlm.evaluation` - closed accuracy and open token recall
- :mod:`microvlm.telemetry` - resource snapshots against a budget envelope
- :mod:`microvlm.serving` - HTTP chat/metrics/health endpoints
- :mod:`microvlm.cli` - one entry point over the whole pipeline
"""

__version__ = "0.1.0"
