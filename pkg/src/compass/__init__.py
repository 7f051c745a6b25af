"""Multimodal contrastive pretraining on a synthetic overhead world.

Modules: ``synthworld`` (data), ``graph`` (modalities, spaces, batches),
``model`` (encoders and heads), ``objectives`` (losses), ``trainer``
(pretraining, finetuning, checkpoints), ``evaluation`` (metrics, probes,
sweeps), ``cli`` (pipeline entry point).
"""

__version__ = "0.1.0"
