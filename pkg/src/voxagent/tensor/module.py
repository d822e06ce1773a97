"""Named parameter containers shared by the agent and vision networks."""

from __future__ import annotations

import numpy as np

from .engine import DTensor, parameter


class ParamStore:
    """Insertion-ordered mapping of parameter name to DTensor."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, DTensor] = {}

    def add(self, name: str, value) -> DTensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = parameter(value, name=name)
        self.params[name] = p
        return p

    def normal(self, name, shape, fan_in) -> DTensor:
        return self.add(name, self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))

    def zeros(self, name, shape) -> DTensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape) -> DTensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name) -> DTensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k!r}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
