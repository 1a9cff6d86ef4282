"""Pipeline configuration: one TOML file plus environment overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..detect2d.train import TrainConfig2D
from ..errors import ContractError, FormatError
from ..fpr3d.train import TrainConfig3D
from ..lungseg import LungSegParams
from ..mip import DEFAULT_THICKNESSES

ENV_DATA_ROOT = "MIPCAD_DATA_ROOT"
ENV_CACHE_ROOT = "MIPCAD_CACHE_ROOT"


@dataclass
class PipelineConfig:
    data_root: Path = Path("data")
    annotations: Path | None = None
    cache_dir: Path = Path("cache")
    thicknesses: tuple[int, ...] = DEFAULT_THICKNESSES
    seed: int = 0
    fold: int = 0
    n_subsets: int = 10
    subsets: list[list[str]] | None = None
    workers: int = 1
    map_threshold: float = 0.5
    distance_ratio: float = 1.1
    max_box_mm: float | None = 40.0
    fuse_cover: float = 0.75
    max_slice_spacing: float = 2.5
    lungseg: LungSegParams = field(default_factory=LungSegParams)
    detect2d: TrainConfig2D = field(default_factory=TrainConfig2D)
    fpr3d: TrainConfig3D = field(default_factory=TrainConfig3D)

    def __post_init__(self):
        self.data_root = Path(self.data_root)
        self.cache_dir = Path(self.cache_dir)
        if self.annotations is not None:
            self.annotations = Path(self.annotations)
        self.thicknesses = tuple(int(t) for t in self.thicknesses)
        if not self.thicknesses or any(t < 1 for t in self.thicknesses):
            raise ContractError(f"slab thicknesses must be positive integers, got {self.thicknesses}")
        if self.subsets is not None:
            seen = [s for sub in self.subsets for s in sub]
            if len(seen) != len(set(seen)):
                raise ContractError("fold subsets overlap")

    @property
    def annotations_path(self) -> Path:
        return self.annotations or self.data_root / "annotations.csv"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("data_root", "cache_dir", "annotations"):
            d[k] = None if d[k] is None else str(d[k])
        d["thicknesses"] = list(self.thicknesses)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> "PipelineConfig":
        raw = dict(raw)
        data = raw.pop("data", {})
        pipe = raw.pop("pipeline", {})
        lung = raw.pop("lungseg", {})
        d2 = raw.pop("detect2d", {})
        d3 = raw.pop("fpr3d", {})
        if raw:
            raise FormatError(f"unknown config sections: {sorted(raw)}")

        def _path(p):
            if p is None:
                return None
            p = Path(p).expanduser()
            return p if p.is_absolute() or base is None else base / p

        kwargs = {k: v for k, v in pipe.items() if k in cls.__dataclass_fields__}
        unknown = set(pipe) - set(kwargs)
        if unknown:
            raise FormatError(f"unknown [pipeline] keys: {sorted(unknown)}")
        return cls(
            data_root=_path(data.get("root", "data")),
            annotations=_path(data.get("annotations")),
            cache_dir=_path(data.get("cache", "cache")),
            lungseg=LungSegParams(**lung),
            detect2d=TrainConfig2D.from_dict(d2),
            fpr3d=TrainConfig3D.from_dict(d3),
            **kwargs,
        )

    @classmethod
    def load(cls, path=None, env: dict | None = None) -> "PipelineConfig":
        """Read a TOML config (relative paths resolve against its folder), then apply env overrides."""
        env = os.environ if env is None else env
        if path is not None:
            path = Path(path)
            try:
                raw = tomllib.loads(path.read_text())
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise FormatError(f"cannot read config {path}: {exc}") from exc
            cfg = cls.from_dict(raw, base=path.parent.resolve())
        else:
            cfg = cls()
        if env.get(ENV_DATA_ROOT):
            cfg.data_root = Path(env[ENV_DATA_ROOT])
        if env.get(ENV_CACHE_ROOT):
            cfg.cache_dir = Path(env[ENV_CACHE_ROOT])
        return cfg


def dump_toml(cfg: PipelineConfig) -> str:
    """Render a config as TOML (the subset of the syntax this package reads)."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return json.dumps(str(v))

    d = cfg.to_dict()
    lines = ["[data]", f"root = {val(d['data_root'])}", f"cache = {val(d['cache_dir'])}"]
    if d["annotations"]:
        lines.append(f"annotations = {val(d['annotations'])}")
    lines += ["", "[pipeline]"]
    for k in ("thicknesses", "seed", "fold", "n_subsets", "workers", "map_threshold", "distance_ratio", "max_box_mm", "fuse_cover", "max_slice_spacing"):
        if d[k] is not None:
            lines.append(f"{k} = {val(d[k])}")
    if d["subsets"] is not None:
        lines.append(f"subsets = {val(d['subsets'])}")
    for section in ("lungseg", "detect2d", "fpr3d"):
        lines += ["", f"[{section}]"]
        lines += [f"{k} = {val(v)}" for k, v in d[section].items() if v is not None]
    return "\n".join(lines) + "\n"
