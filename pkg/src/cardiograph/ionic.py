"""Two-variable Rogers-McCulloch membrane model."""
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class IonicParams:
    G: float = 1.5
    eta1: float = 4.4
    eta2: float = 0.012
    eta3: float = 1.0
    v_th: float = 13.0
    v_p: float = 100.0

    def __post_init__(self):
        vals = asdict(self).values()
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("ionic parameters must be finite")
        if not (self.v_p > self.v_th > 0):
            raise ConfigError("need v_p > v_th > 0")
        if not self.eta2 > 0:
            raise ConfigError("eta2 must be positive")


def ionic_current(v, w, p: IonicParams = IonicParams()):
    """Cubic excitation term plus linear recovery coupling (current density)."""
    return p.G * v * (1.0 - v / p.v_th) * (1.0 - v / p.v_p) + p.eta1 * v * w


def recovery_rhs(v, w, p: IonicParams = IonicParams()):
    return p.eta2 * (v / p.v_p - p.eta3 * w)
