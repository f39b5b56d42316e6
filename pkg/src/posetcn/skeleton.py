from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]  # -1 marks the root
    left_right_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        j = len(self.joint_names)
        if len(self.parents) != j:
            raise ConfigError(f"skeleton has {j} joint names but {len(self.parents)} parents")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ConfigError(f"skeleton must have exactly one root, found {len(roots)}")
        for i in range(j):
            seen, k = set(), i
            while self.parents[k] >= 0:
                if k in seen or self.parents[k] >= j:
                    raise ConfigError(f"skeleton parent chain from joint {i} is cyclic or out of range")
                seen.add(k)
                k = self.parents[k]
        flat = [i for pair in self.left_right_pairs for i in pair]
        if len(flat) != len(set(flat)):
            raise ConfigError("a joint appears in more than one left/right pair")
        if any(not 0 <= i < j for i in flat):
            raise ConfigError("left/right pair index out of range")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return next(i for i, p in enumerate(self.parents) if p < 0)

    @property
    def bones(self) -> list[tuple[int, int]]:
        """``(child, parent)`` pairs in joint order."""
        return [(i, p) for i, p in enumerate(self.parents) if p >= 0]

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.left_right_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "left_right_pairs": [list(p) for p in self.left_right_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            joint_names=tuple(d["joint_names"]),
            parents=tuple(int(p) for p in d["parents"]),
            left_right_pairs=tuple(tuple(int(i) for i in p) for p in d["left_right_pairs"]),
        )


# 17-joint layout in the Human3.6M ordering
H36M_17 = Skeleton(
    joint_names=(
        "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine",
        "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    ),
    parents=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
    left_right_pairs=((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)),
)
