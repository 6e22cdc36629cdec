"""Schema-guided zero-shot dialogue state tracking.

Modules: ``data`` (corpus model), ``features`` (six prediction tasks),
``encoder`` and ``heads`` (models), ``training``, ``tracker`` (state
summarisation), ``metrics`` (evaluation), ``synth`` and ``cli``.
"""

from .data import Dialogue, DialogueState, ServiceSchema, load_dialogues, load_schemas
from .features import EncodedExample, Featurizer, Task

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "DialogueState",
    "EncodedExample",
    "Featurizer",
    "ServiceSchema",
    "Task",
    "load_dialogues",
    "load_schemas",
]
