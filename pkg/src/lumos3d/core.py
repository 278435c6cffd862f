"""Shared containers and file I/O: tensors, images, Gaussian scenes, cameras."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"LUMT"
TENSOR_VERSION = 1
DTYPE_F32 = 0

SH_C0 = 0.28209479177387814


class TensorFormatError(ValueError):
    """Base class for malformed LUMT tensor files."""


class BadMagicError(TensorFormatError):
    pass


class DtypeMismatchError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class ZeroRankError(TensorFormatError):
    pass


class ImageFormatError(ValueError):
    pass


class PlyFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Raw tensors
# ---------------------------------------------------------------------------

def as_tensor(data, dims=None) -> np.ndarray:
    """Validate and return a float32 row-major array (the TensorF contract)."""
    arr = np.asarray(data, dtype=np.float32)
    if dims is None and arr.ndim == 0:
        raise ZeroRankError("zero-rank tensor rejected")
    arr = np.ascontiguousarray(arr)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if int(np.prod(dims)) != arr.size:
            raise ValueError(f"dims {dims} do not match {arr.size} values")
        arr = arr.reshape(dims)
    if arr.ndim == 0 or (dims is not None and len(dims) == 0):
        raise ZeroRankError("zero-rank tensor rejected")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def tensor_write(t, path) -> None:
    arr = as_tensor(t)
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def tensor_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise TruncatedFileError("file shorter than LUMT header")
    if raw[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}")
    version, dtype, rank = struct.unpack_from("<BBB", raw, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported LUMT version {version}")
    if dtype != DTYPE_F32:
        raise DtypeMismatchError(f"dtype code {dtype} is not f32")
    if rank == 0:
        raise ZeroRankError("zero-rank tensor rejected")
    offset = 7 + 8 * rank
    if len(raw) < offset:
        raise TruncatedFileError("truncated dims block")
    dims = struct.unpack_from(f"<{rank}Q", raw, 7)
    count = int(np.prod(dims))
    if len(raw) < offset + 4 * count:
        raise TruncatedFileError(f"expected {count} values, file too short")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return as_tensor(data.astype(np.float32).reshape(dims))


# ---------------------------------------------------------------------------
# Images (linear light in memory, 8-bit sRGB on disk)
# ---------------------------------------------------------------------------

def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(lin):
    lin = np.clip(np.asarray(lin, dtype=np.float64), 0.0, None)
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1.0 / 2.4) - 0.055)


def quantize8(srgb) -> np.ndarray:
    """Round half up to 8-bit codes."""
    return np.floor(np.clip(srgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_srgb8(img) -> np.ndarray:
    return quantize8(linear_to_srgb(np.clip(img, 0.0, 1.0)))


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 image, got shape {img.shape}")
    if np.any(img < 0) or not np.all(np.isfinite(img)):
        raise ImageFormatError("linear image values must be finite and >= 0")
    return img


def image_load(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
            codes = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: decode failure: {exc}") from exc
    return srgb_to_linear(codes / 255.0)


def image_save(img, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 image, got shape {img.shape}")
    Image.fromarray(to_srgb8(img), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Gaussian scenes
# ---------------------------------------------------------------------------

def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def quat_to_rotmat(q) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), normalized first, to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray  # (K, 3)


@dataclass
class GaussianScene:
    """Structure-of-arrays Gaussian scene.

    Attributes
    ----------
    centers : (N, 3) world positions.
    opacities : (N,) values in [0, 1].
    rotations : (N, 4) unit quaternions, (w, x, y, z).
    scales : (N, 3) positive standard deviations.
    sh : (N, (degree+1)**2, 3) color coefficients, coefficient-major.
    """

    centers: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in [0, 3], got {self.sh_degree}")
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, sh_coeff_count(self.sh_degree), 3)

    def __len__(self) -> int:
        return len(self.centers)

    def validate(self, atol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ValueError("rotation quaternions must be unit length")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")
        for name in ("centers", "opacities", "rotations", "scales", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.centers.copy(), self.opacities.copy(), self.rotations.copy(),
                             self.scales.copy(), self.sh.copy(), self.sh_degree)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.centers[i].copy(), float(self.opacities[i]),
                                 self.rotations[i].copy(), self.scales[i].copy(), self.sh[i].copy())

    @classmethod
    def from_primitives(cls, prims, sh_degree: int = 0) -> "GaussianScene":
        prims = list(prims)
        k = sh_coeff_count(sh_degree)
        if not prims:
            return cls.empty(sh_degree)
        for p in prims:
            if np.asarray(p.sh).shape != (k, 3):
                raise ValueError(f"primitive sh shape {np.shape(p.sh)} does not match degree {sh_degree}")
        return cls(np.stack([p.center for p in prims]), np.array([p.opacity for p in prims]),
                   np.stack([p.rotation for p in prims]), np.stack([p.scale for p in prims]),
                   np.stack([p.sh for p in prims]), sh_degree)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, k, 3)), sh_degree)

    def astype(self, dtype) -> dict:
        """Parameter arrays cast to ``dtype``; used by the 32-bit render path."""
        return {name: getattr(self, name).astype(dtype)
                for name in ("centers", "opacities", "rotations", "scales", "sh")}


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p) - np.log1p(-p)


def ply_write(scene: GaussianScene, path) -> None:
    n = len(scene)
    if n == 0:
        raise ValueError("cannot write an empty scene")
    k = sh_coeff_count(scene.sh_degree)
    names = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    cols = [scene.centers, _logit(scene.opacities)[:, None], np.log(scene.scales),
            scene.rotations, scene.sh[:, 0, :]]
    if k > 1:
        # channel-major rest coefficients, as the common splat layout stores them
        cols.append(scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1))
    data = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


_PLY_REQUIRED = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                 "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]
_PLY_IGNORED = {"nx", "ny", "nz"}


def ply_read(path) -> GaussianScene:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise PlyFormatError("missing ply magic")
        props, n, fmt = [], None, None
        while True:
            line = f.readline()
            if not line:
                raise PlyFormatError("unterminated header")
            tokens = line.decode("ascii").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                if tokens[1] != "vertex" or n is not None:
                    raise PlyFormatError(f"unsupported element {tokens[1]}")
                n = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] != "float":
                    raise PlyFormatError(f"unsupported property type {tokens[1]}")
                props.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian" or n is None:
            raise PlyFormatError("only binary_little_endian vertex PLY is supported")
        body = f.read()

    rest = sorted((p for p in props if p.startswith("f_rest_")), key=lambda p: int(p[7:]))
    unknown = set(props) - set(_PLY_REQUIRED) - set(rest) - _PLY_IGNORED
    missing = set(_PLY_REQUIRED) - set(props)
    if unknown or missing:
        raise PlyFormatError(f"unknown property layout (unknown={sorted(unknown)}, missing={sorted(missing)})")
    if [int(p[7:]) for p in rest] != list(range(len(rest))):
        raise PlyFormatError("f_rest_* properties are not contiguous")
    k = len(rest) // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if 3 * (k - 1) != len(rest) or sh_coeff_count(degree) != k or degree > 3:
        raise PlyFormatError(f"{len(rest)} f_rest values do not match an SH degree <= 3")
    if len(body) < 4 * n * len(props):
        raise PlyFormatError("truncated vertex data")
    data = np.frombuffer(body, dtype="<f4", count=n * len(props)).reshape(n, len(props)).astype(np.float64)
    col = {p: data[:, i] for i, p in enumerate(props)}

    def stack(names):
        return np.stack([col[p] for p in names], axis=1)

    rot = stack(["rot_0", "rot_1", "rot_2", "rot_3"])
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = stack(["f_dc_0", "f_dc_1", "f_dc_2"])
    if k > 1:
        sh[:, 1:, :] = stack(rest).reshape(n, 3, k - 1).transpose(0, 2, 1)
    opacity = 1.0 / (1.0 + np.exp(-col["opacity"]))
    return GaussianScene(stack(["x", "y", "z"]), opacity, rot, np.exp(stack(["scale_0", "scale_1", "scale_2"])),
                         sh, degree)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraView:
    """Pinhole camera; ``w2c`` maps world to camera frame (+x right, +y down, +z forward)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        R = self.w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ValueError("w2c rotation block must be orthonormal with det +1")
        if not np.allclose(self.w2c[3], [0, 0, 0, 1]):
            raise ValueError("w2c bottom row must be (0, 0, 0, 1)")

    @property
    def R(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def c2w(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.R.T
        out[:3, 3] = self.center
        return out

    def to_dict(self) -> dict:
        return {"width": int(self.width), "height": int(self.height), "fx": float(self.fx),
                "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
                "w2c": [float(v) for v in self.w2c.reshape(-1)]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), np.array(d["w2c"], dtype=np.float64).reshape(4, 4))


def cameras_write(cams, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


def cameras_read(path) -> list[CameraView]:
    return [CameraView.from_dict(d) for d in json.loads(Path(path).read_text())]
