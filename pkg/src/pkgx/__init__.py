"""Persona-guided path reasoning over knowledge graphs.

Modules: ``kg`` (triple store), ``env`` (walk environment), ``policy`` and
``agent`` (REINFORCE training, beam inference), ``reward`` (gated rewards),
``persona`` (feedback clustering and persona synthesis), ``llm`` (provider
gateway), ``stats`` (evaluation statistics) and ``cli``.
"""

__version__ = "0.1.0"
