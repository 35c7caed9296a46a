from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class HermitianMatrix(BaseModel):
    """3x3 complex matrix given as separate real and imaginary tables."""

    model_config = ConfigDict(extra="forbid")

    real: List[List[float]]
    imag: List[List[float]] = Field(
        default_factory=lambda: [[0.0] * 3 for _ in range(3)]
    )

    @field_validator("real", "imag")
    @classmethod
    def _three_by_three(cls, value):
        if len(value) != 3 or any(len(row) != 3 for row in value):
            raise ValueError("matrix must be 3x3")
        return value

    def to_numpy(self) -> np.ndarray:
        return np.asarray(self.real, dtype=np.float64) + 1j * np.asarray(
            self.imag, dtype=np.float64
        )

    @classmethod
    def from_numpy(cls, matrix: np.ndarray) -> "HermitianMatrix":
        matrix = np.asarray(matrix, dtype=np.complex128)
        return cls(real=matrix.real.tolist(), imag=matrix.imag.tolist())


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(default=128, ge=1)
    width: int = Field(default=128, ge=1)
    n_classes: int = Field(default=5, ge=1, le=255)
    looks: int = Field(default=4, ge=1)
    layout: Literal["voronoi"] = "voronoi"
    n_regions: int = Field(default=24, ge=1)
    # None -> built-in per-class covariances
    covariances: Optional[List[HermitianMatrix]] = None
    class_names: Optional[List[str]] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.covariances is not None and len(self.covariances) != self.n_classes:
            raise ValueError(
                f"expected {self.n_classes} covariances, got {len(self.covariances)}"
            )
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValueError(
                f"expected {self.n_classes} class names, got {len(self.class_names)}"
            )
        if self.n_regions < self.n_classes:
            raise ValueError("n_regions must be at least n_classes")
        if self.n_regions > self.height * self.width:
            raise ValueError("n_regions cannot exceed the pixel count")
        return self


class DataSourceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "directory"] = "synthetic"
    directory: Optional[str] = None
    scene: SceneSpec = Field(default_factory=SceneSpec)

    @model_validator(mode="after")
    def _directory_given(self):
        if self.kind == "directory" and not self.directory:
            raise ValueError("data.directory is required when data.kind is 'directory'")
        return self


class SuperpixelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # None -> one superpixel per `pixels_per_superpixel` pixels
    k_target: Optional[int] = Field(default=None, ge=1)
    pixels_per_superpixel: float = Field(default=100.0, gt=0)
    compactness: float = Field(default=10.0, gt=0)
    iterations: int = Field(default=10, ge=0)

    def resolve_k_target(self, height: int, width: int) -> int:
        if self.k_target is not None:
            return self.k_target
        return max(1, int(round(height * width / self.pixels_per_superpixel)))


class GraphMAEConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    in_dim: int = Field(default=9, ge=1)
    head_dim: int = Field(default=16, ge=1)
    heads: int = Field(default=4, ge=1)
    encoder_layers: int = Field(default=4, ge=1)
    ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma: float = Field(default=3.0, ge=1.0)
    epochs: int = Field(default=400, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @property
    def embedding_dim(self) -> int:
        return self.heads * self.head_dim


class CnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patch_size: int = Field(default=15, ge=5)
    channels: Tuple[int, int, int, int] = (128, 256, 512, 512)
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("patch_size")
    @classmethod
    def _odd(cls, value):
        if value % 2 == 0:
            raise ValueError("patch_size must be odd")
        return value


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.4, ge=0.0, le=1.0)
    epochs: int = Field(default=250, ge=0)
    lr: float = Field(default=5e-4, gt=0)
    batch_size: int = Field(default=64, ge=1)
    predict_batch_size: int = Field(default=1024, ge=1)
    seed: int = 0


class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    per_class: int = Field(default=111, ge=1)
    # None -> derived from the root seed
    seed: Optional[int] = None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: str = "out"
    data: DataSourceConfig = Field(default_factory=DataSourceConfig)
    superpixel: SuperpixelConfig = Field(default_factory=SuperpixelConfig)
    graphmae: GraphMAEConfig = Field(default_factory=GraphMAEConfig)
    cnn: CnnConfig = Field(default_factory=CnnConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
