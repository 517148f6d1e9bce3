"""Pipeline configuration (YAML)."""
from __future__ import annotations

import os
from datetime import datetime
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .catalog import Aoi, Poi, SelectionConfig
from .geo import Crs, GeoPolygon
from .hub import ThrottlePolicy
from .tiler import ALIGN_M, WindowSpec
from .timefmt import format_utc, parse_utc


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PoiModel(_Model):
    start: datetime
    end: datetime

    @field_validator("start", "end", mode="before")
    @classmethod
    def _utc(cls, v):
        return parse_utc(v)

    @model_validator(mode="after")
    def _order(self):
        if not self.start < self.end:
            raise ValueError("poi.start must be before poi.end")
        return self


class SelectionModel(_Model):
    cloud_max_pct: float = Field(5.0, ge=0, le=100)
    min_aoi_overlap: float = Field(0.0, ge=0, le=1)
    min_data_coverage_pct: float = Field(0.0, ge=0, le=100)
    target_date_count: int = Field(10, ge=1)


class ThrottleModel(_Model):
    min_request_interval_s: float = Field(1800.0, gt=0)
    lta_availability_window_s: float = Field(86400.0, gt=0)
    poll_interval_s: float = Field(600.0, gt=0)
    max_concurrent_downloads: int = Field(2, ge=1)
    max_attempts: int = Field(5, ge=1)


class HubModel(_Model):
    url: str
    # name of an environment variable holding "user:password"
    credentials_env: str | None = None
    throttle: ThrottleModel = ThrottleModel()


class LabelsModel(_Model):
    parcels: str | None = None
    year: int | None = None
    scale: int = Field(1, ge=1)
    background: int = Field(0, ge=0)


class TilingModel(_Model):
    window_m: int = 480
    stride_m: int = 480
    labeled_only: bool = False
    min_labeled_fraction: float = Field(0.0, ge=0, le=1)

    @field_validator("window_m", "stride_m")
    @classmethod
    def _aligned(cls, v, info):
        if v <= 0:
            raise ValueError(f"{info.field_name} must be positive")
        if v % ALIGN_M:
            raise ValueError(f"{info.field_name} must be divisible by {ALIGN_M}")
        return v


class AssemblyModel(_Model):
    min_t: int = Field(1, ge=1)
    split_ratios: list[float] = [0.8, 0.1, 0.1]
    seed: int = 0

    @field_validator("split_ratios")
    @classmethod
    def _ratios(cls, v):
        if not 1 <= len(v) <= 3 or any(r < 0 for r in v) or abs(sum(v) - 1) > 1e-9:
            raise ValueError("split_ratios must be 1-3 non-negative numbers summing to 1")
        return v


class PipelineConfig(_Model):
    # [[lon, lat], ...], a POLYGON WKT string, or a path to a GeoJSON/WKT file
    aoi: list[list[float]] | str
    poi: PoiModel
    selection: SelectionModel = SelectionModel()
    hub: HubModel
    labels: LabelsModel = LabelsModel()
    tiling: TilingModel = TilingModel()
    assembly: AssemblyModel = AssemblyModel()
    output: str = "out"
    base_dir: str | None = Field(None, exclude=True)

    @field_validator("aoi")
    @classmethod
    def _aoi_shape(cls, v):
        if isinstance(v, list) and (len(v) < 3 or any(len(p) != 2 for p in v)):
            raise ValueError("aoi needs at least three [lon, lat] pairs")
        return v

    @model_validator(mode="after")
    def _check_modules(self):
        # module-level invariants, so bad configs fail at load time
        self.aoi_polygon()
        return self

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        if not path.is_absolute() and self.base_dir:
            path = Path(self.base_dir) / path
        return path

    @property
    def output_root(self) -> Path:
        return self.resolve(self.output)

    def aoi_polygon(self) -> GeoPolygon:
        if isinstance(self.aoi, list):
            return GeoPolygon(tuple(tuple(p) for p in self.aoi), Crs.wgs84())
        text = self.aoi.strip()
        if not text.upper().startswith("POLYGON"):
            path = self.resolve(text)
            text = path.read_text()
            if path.suffix.lower() in (".json", ".geojson"):
                import json

                doc = json.loads(text)
                geom = doc["features"][0]["geometry"] if doc.get("type") == "FeatureCollection" else doc.get("geometry", doc)
                rings = geom["coordinates"]
                return GeoPolygon(tuple(map(tuple, rings[0])), Crs.wgs84(), tuple(tuple(map(tuple, r)) for r in rings[1:]))
        return GeoPolygon.from_wkt(text)

    def aoi_obj(self) -> Aoi:
        return Aoi(self.aoi_polygon())

    def poi_obj(self) -> Poi:
        return Poi(self.poi.start, self.poi.end)

    def selection_obj(self) -> SelectionConfig:
        return SelectionConfig(**self.selection.model_dump())

    def throttle_policy(self) -> ThrottlePolicy:
        t = self.hub.throttle
        return ThrottlePolicy(
            min_request_interval=t.min_request_interval_s,
            lta_availability_window=t.lta_availability_window_s,
            poll_interval=t.poll_interval_s,
            max_concurrent_downloads=t.max_concurrent_downloads,
            max_attempts=t.max_attempts,
        )

    def window_spec(self) -> WindowSpec:
        return WindowSpec(**self.tiling.model_dump())

    def credentials(self) -> tuple[str, str] | None:
        if not self.hub.credentials_env:
            return None
        raw = os.environ.get(self.hub.credentials_env)
        if not raw or ":" not in raw:
            raise ValueError(f"environment variable {self.hub.credentials_env} must hold user:password")
        user, pw = raw.split(":", 1)
        return user, pw


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: configuration must be a mapping")
    return parse_config(doc, base_dir=path.parent)


def parse_config(doc: dict, base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    return PipelineConfig(**doc, base_dir=None if base_dir is None else str(base_dir))


def dump_config(cfg: PipelineConfig) -> str:
    doc = cfg.model_dump(mode="python", exclude={"base_dir"})
    doc["poi"] = {k: format_utc(v) for k, v in doc["poi"].items()}
    return yaml.safe_dump(doc, sort_keys=False)
