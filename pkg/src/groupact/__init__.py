"""Group activity recognition with a clustered spatial-temporal transformer.

Everything runs on a small reverse-mode autodiff engine over numpy arrays:
no framework, no hidden state. The package splits into the engine
(:mod:`groupact.tensor`), reusable attention layers (:mod:`groupact.layers`),
k-means clustering (:mod:`groupact.clustering`), the scene token builder
(:mod:`groupact.group_token`), the model (:mod:`groupact.model`), synthetic
clip generation (:mod:`groupact.synth`), and the training loop plus CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
