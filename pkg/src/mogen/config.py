from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d_net: int = 64
    L_emb: int = 32
    L_phr: int = 8
    L_str: int = 16
    n_blocks: int = 6
    layout_block: int = 4  # 1-based: the fourth block
    image_size: int = 32
    patch: int = 4
    n_heads: int = 4
    T: int = 300  # smallest T whose linear schedule reaches alpha-bar_T < 0.05
    vocab: int = 4096
    structure_patch: int = 8
    object_patch: int = 16

    def __post_init__(self):
        if not 1 <= self.layout_block <= self.n_blocks:
            raise ValueError(f"layout_block must lie in [1, {self.n_blocks}], got {self.layout_block}")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        for name in ("d", "d_net"):
            if getattr(self, name) % self.n_heads:
                raise ValueError(f"{name} must be divisible by n_heads")
        if self.object_patch % self.structure_patch:
            raise ValueError("object_patch must be a multiple of structure_patch")

    @property
    def L_net(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def tiny_config(**overrides) -> ModelConfig:
    """Small dimensions used for gradient checks and fast tests."""
    base = dict(d=8, d_net=8, L_emb=6, L_phr=3, L_str=4, n_blocks=3, layout_block=2,
                image_size=16, patch=8, n_heads=2, T=50, vocab=64,
                structure_patch=8, object_patch=16)
    base.update(overrides)
    return ModelConfig(**base)
