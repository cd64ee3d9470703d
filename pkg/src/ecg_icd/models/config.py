from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

S4 = "S4"
XRESNET1D = "XRESNET1D"
FAMILIES = (S4, XRESNET1D)


@dataclass(frozen=True)
class ModelConfig:
    family: str = S4
    in_leads: int = 12
    n_labels: int = 1
    input_len: int = 250
    # S4
    n_layers: int = 4
    d_model: int = 512
    d_state: int = 8
    bidirectional: bool = True
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    # XResNet1d
    stage_depths: tuple = (3, 4, 6, 3)
    base_width: int = 64
    expansion: int = 4
    stem_kernel: int = 5
    block_kernel: int = 3
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        dims = [self.in_leads, self.n_labels, self.input_len, self.n_layers, self.d_model,
                self.d_state, self.base_width, self.expansion, *self.stage_depths]
        if any(int(d) < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Presets only scale widths; depth and layer topology stay fixed.
_PRESETS = {
    (S4, "paper"): dict(n_layers=4, d_model=512, d_state=8, bidirectional=True),
    (S4, "desk"): dict(n_layers=4, d_model=64, d_state=8, bidirectional=True),
    (S4, "tiny"): dict(n_layers=4, d_model=32, d_state=8, bidirectional=True),
    (XRESNET1D, "paper"): dict(stage_depths=(3, 4, 6, 3), base_width=64),
    (XRESNET1D, "desk"): dict(stage_depths=(3, 4, 6, 3), base_width=32),
    (XRESNET1D, "tiny"): dict(stage_depths=(3, 4, 6, 3), base_width=8),
}
PRESETS = tuple(sorted({p for _, p in _PRESETS}))


def preset(family: str, name: str = "desk", **overrides) -> ModelConfig:
    family = family.upper().replace("-", "").replace("_", "")
    if family == "XRESNET1D50":
        family = XRESNET1D
    try:
        base = _PRESETS[(family, name)]
    except KeyError:
        raise ValueError(f"no preset {name!r} for family {family!r}") from None
    return replace(ModelConfig(family=family, **base), **overrides)
