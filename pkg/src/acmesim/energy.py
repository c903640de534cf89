"""Per-device power, latency and training-energy model.

Power and latency are affine in the backbone's width-depth product ``w * d``;
the increments are stored as coefficients proportional to the base values, so
they can never drift away from them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

from acmesim.errors import ConfigError

DEFAULT_ALPHA_G = 0.1
DEFAULT_ALPHA_BETA = 0.05
DEFAULT_ALPHA_L = 0.25


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    G: float  # base power, W
    L: float  # base latency per epoch, s
    C: float  # storage budget, parameters
    k: int = 1  # epochs
    p: int = 0  # patch count
    vcpus: int = 1
    alpha_G: float = DEFAULT_ALPHA_G
    alpha_beta: float = DEFAULT_ALPHA_BETA
    alpha_L: float = DEFAULT_ALPHA_L

    def __post_init__(self):
        for name in ("G", "L", "C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.k > 0:
            raise ValueError("k must be positive")
        for name in ("alpha_G", "alpha_beta", "alpha_L", "p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def dG(self) -> float:
        return self.alpha_G * self.G

    @property
    def G_beta(self) -> float:
        return self.alpha_beta * self.G

    @property
    def dL(self) -> float:
        return self.alpha_L * self.L

    def scaled(self, c: float) -> "DeviceProfile":
        """Same coefficients, base power and latency multiplied by ``c``."""
        d = asdict(self)
        d["G"] *= c
        d["L"] *= c
        return DeviceProfile(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _wd(spec) -> float:
    w, d = (spec.w, spec.d) if hasattr(spec, "w") else spec
    return float(w) * float(d)


def power(profile: DeviceProfile, spec) -> float:
    """Watts: base + increment * w * d + patches * batch term."""
    return profile.G + profile.dG * _wd(spec) + profile.p * profile.G_beta


def latency(profile: DeviceProfile, spec) -> float:
    """Seconds per epoch."""
    return profile.L + profile.dL * _wd(spec)


def energy(profile: DeviceProfile, spec) -> float:
    """Joules over ``k`` epochs."""
    return profile.k * power(profile, spec) * latency(profile, spec)


def cluster_max_energy(profiles: Iterable[DeviceProfile], spec) -> float:
    profiles = list(profiles)
    if not profiles:
        raise ValueError("cluster has no devices")
    return max(energy(p, spec) for p in profiles)


# ---------------------------------------------------------------- profile files

_FIELDS = {f.name for f in fields(DeviceProfile)}
_REQUIRED = {"device_id", "G", "L", "C"}


def _line_of(text: str, index: int) -> int:
    """1-based line of the ``index``-th top-level array element in ``text``."""
    depth, count = 0, -1
    in_str = esc = False
    for pos, ch in enumerate(text):
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in "[{":
            if depth == 1 and ch == "{":
                count += 1
                if count == index:
                    return text.count("\n", 0, pos) + 1
            depth += 1
        elif ch in "]}":
            depth -= 1
    return 1


def parse_profiles(text: str, source: str = "<profiles>") -> list[DeviceProfile]:
    """Parse a JSON array of profiles; errors carry ``source:line``."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}", f"invalid JSON: {e.msg}") from None
    if not isinstance(raw, list):
        raise ConfigError(f"{source}:1", "expected a JSON array of device profiles")
    out = []
    seen = set()
    for i, item in enumerate(raw):
        where = f"{source}:{_line_of(text, i)}"
        if not isinstance(item, dict):
            raise ConfigError(where, f"profile {i} is not an object")
        missing = _REQUIRED - set(item)
        if missing:
            raise ConfigError(where, f"profile {i} missing {sorted(missing)}")
        unknown = set(item) - _FIELDS
        if unknown:
            raise ConfigError(where, f"profile {i} has unknown keys {sorted(unknown)}")
        try:
            prof = DeviceProfile(**item)
        except (TypeError, ValueError) as e:
            raise ConfigError(where, f"profile {i}: {e}") from None
        if prof.device_id in seen:
            raise ConfigError(where, f"duplicate device_id {prof.device_id!r}")
        seen.add(prof.device_id)
        out.append(prof)
    return out


def load_profiles(path: str | Path) -> list[DeviceProfile]:
    path = Path(path)
    return parse_profiles(path.read_text(), str(path))


def dump_profiles(profiles: Iterable[DeviceProfile]) -> str:
    return json.dumps([p.to_dict() for p in profiles], indent=2) + "\n"


STORAGE_MENU_MB = (200, 250, 300, 350, 400)
VCPU_RANGE = (3, 7)
BYTES_PER_PARAM = 4


def generate_profiles(n: int, rng, budget_divisor: float = 1.0, prefix: str = "dev",
                      k: int = 1, p: int = 0, alphas: dict | None = None) -> list[DeviceProfile]:
    """Random device menu: 3-7 vCPUs and 200-400 MB storage expressed in parameters.

    More vCPUs mean more power draw and shorter epochs. ``budget_divisor``
    shrinks the storage budget to toy scale.
    """
    alphas = alphas or {}
    out = []
    for i in range(n):
        vcpus = int(rng.integers(VCPU_RANGE[0], VCPU_RANGE[1] + 1))
        mb = float(STORAGE_MENU_MB[int(rng.integers(len(STORAGE_MENU_MB)))])
        budget = mb * 1e6 / BYTES_PER_PARAM / budget_divisor
        G = 4.0 * vcpus * float(rng.uniform(0.9, 1.1))
        L = 20.0 / vcpus * float(rng.uniform(0.9, 1.1))
        out.append(DeviceProfile(f"{prefix}{i}", G=G, L=L, C=budget, k=k, p=p, vcpus=vcpus,
                                 **alphas))
    return out
