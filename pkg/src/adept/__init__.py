"""Token-level early exit for a small decoder-only transformer.

The frozen base model lives in :mod:`adept.model`; exit decisions in
:mod:`adept.exit_policy`; the hidden state mapper in :mod:`adept.hsm`; key/value
synthesis in :mod:`adept.kv_synth`; the batched scheduler in
:mod:`adept.runtime`; FLOP accounting in :mod:`adept.cost_model`; mapper
training in :mod:`adept.training`; and the experiment harness in
:mod:`adept.cli`.
"""

__version__ = "0.1.0"
