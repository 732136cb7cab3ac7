"""On-disk formats binding the pipeline stages: binary PPM/PFM/PGM images,
camera/track JSON schemas, the dataset directory layout, and the "DRPS"
checkpoint container. Every writer/reader pair round-trips losslessly."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .canonical import DedupMaskSet, GaussianGrid, VirtualViewBundle
from .core import Camera, RigidPose
from .synthdata import FrameObs, SceneSequence, SceneSpec, TrackSet

CHECKPOINT_MAGIC = b"DRPS"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# images


def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM (P6); input is (H, W, 3) float in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) float64 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    dims, rest = rest.split(b"\n", 1)
    maxval, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    img = np.frombuffer(rest[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / float(int(maxval))


def write_pgm(path, mask: np.ndarray):
    """8-bit binary PGM (P5); 255 marks foreground."""
    m = (np.asarray(mask).astype(bool) * np.uint8(255))
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(m.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    dims, rest = rest.split(b"\n", 1)
    _, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    return np.frombuffer(rest[: w * h], dtype=np.uint8).reshape(h, w) >= 128


def write_pfm(path, depth: np.ndarray):
    """Little-endian single-channel PFM (Pf), bottom-up row order per spec."""
    d = np.asarray(depth, dtype=np.float32)
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"Pf":
        raise ValueError(f"{path}: not a single-channel PFM")
    dims, rest = rest.split(b"\n", 1)
    scale, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    dt = "<f4" if float(scale) < 0 else ">f4"
    d = np.frombuffer(rest[: w * h * 4], dtype=dt).reshape(h, w)
    return np.flipud(d).astype(np.float64)


# ---------------------------------------------------------------------------
# cameras / tracks JSON


def camera_to_json(cam: Camera) -> dict:
    return {"focal": cam.focal,
            "pp": list(map(float, cam.principal_point)),
            "resolution": [cam.width, cam.height],
            "world_to_cam": {
                "quat": list(map(float, cam.world_to_cam.rotation)),
                "t": list(map(float, cam.world_to_cam.translation))}}


def camera_from_json(d: dict) -> Camera:
    pose = RigidPose(np.array(d["world_to_cam"]["quat"], dtype=np.float64),
                     np.array(d["world_to_cam"]["t"], dtype=np.float64))
    return Camera(focal=float(d["focal"]),
                  principal_point=np.array(d["pp"], dtype=np.float64),
                  resolution=tuple(d["resolution"]), world_to_cam=pose)


def tracks_to_json(tracks: TrackSet) -> dict:
    queries = [{"px1": list(map(float, tracks.query_px[k])),
                "p3d1": list(map(float, tracks.query_p3d[k])),
                "part": int(tracks.query_part[k])}
               for k in range(len(tracks.query_px))]
    frames = []
    for t in range(tracks.px.shape[0]):
        frames.append([{"px": list(map(float, tracks.px[t, k])),
                        "p3d": list(map(float, tracks.p3d[t, k])),
                        "visible": bool(tracks.visible[t, k])}
                       for k in range(tracks.px.shape[1])])
    return {"queries": queries, "frames": frames}


def tracks_from_json(d: dict) -> TrackSet:
    q = d["queries"]
    k = len(q)
    t = len(d["frames"])
    px = np.zeros((t, k, 2))
    p3d = np.zeros((t, k, 3))
    vis = np.zeros((t, k), dtype=bool)
    for ti, frame in enumerate(d["frames"]):
        for ki, e in enumerate(frame):
            px[ti, ki] = e["px"]
            p3d[ti, ki] = e["p3d"]
            vis[ti, ki] = e["visible"]
    return TrackSet(
        query_px=np.array([e["px1"] for e in q], dtype=np.float64),
        query_p3d=np.array([e["p3d1"] for e in q], dtype=np.float64),
        query_part=np.array([e["part"] for e in q], dtype=np.int64),
        px=px, p3d=p3d, visible=vis)


# ---------------------------------------------------------------------------
# dataset directory layout


def write_sequence(dirpath: Path, seq: SceneSequence):
    dirpath.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, frame in enumerate(seq.frames):
        stem = dirpath / f"frame_{i:05d}"
        write_ppm(f"{stem}.ppm", frame.image)
        write_pfm(f"{stem}.pfm", frame.depth)
        write_pgm(f"{stem}.pgm", frame.mask)
        cams.append(camera_to_json(frame.camera))
    return cams


def read_sequence(dirpath: Path, kind: str, cams: list[dict]) -> SceneSequence:
    frames = []
    for i, cam in enumerate(cams):
        stem = dirpath / f"frame_{i:05d}"
        for suffix in (".ppm", ".pfm", ".pgm"):
            if not Path(f"{stem}{suffix}").exists():
                raise FileNotFoundError(f"{stem}{suffix}")
        frames.append(FrameObs(image=read_ppm(f"{stem}.ppm"),
                               depth=read_pfm(f"{stem}.pfm"),
                               mask=read_pgm(f"{stem}.pgm"),
                               camera=camera_from_json(cam)))
    return SceneSequence(kind=kind, frames=frames)


def write_dataset(outdir, spec: SceneSpec, prescan: SceneSequence,
                  dynamic: SceneSequence, test: SceneSequence, tracks: TrackSet):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cameras = {}
    for name, seq in (("prescan", prescan), ("dynamic", dynamic), ("test", test)):
        cameras[name] = write_sequence(out / name, seq)
    (out / "cameras.json").write_text(json.dumps(cameras, indent=1, sort_keys=True))
    (out / "tracks.json").write_text(json.dumps(tracks_to_json(tracks), sort_keys=True))
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))


def read_dataset(dirpath):
    d = Path(dirpath)
    for required in ("cameras.json", "tracks.json", "scene.json"):
        if not (d / required).exists():
            raise FileNotFoundError(d / required)
    cameras = json.loads((d / "cameras.json").read_text())
    spec = SceneSpec.from_dict(json.loads((d / "scene.json").read_text()))
    tracks = tracks_from_json(json.loads((d / "tracks.json").read_text()))
    prescan = read_sequence(d / "prescan", "prescan", cameras["prescan"])
    dynamic = read_sequence(d / "dynamic", "dynamic", cameras["dynamic"])
    test = read_sequence(d / "test", "test", cameras["test"])
    return spec, prescan, dynamic, test, tracks


# ---------------------------------------------------------------------------
# checkpoint container: magic, version u32, then length-prefixed named
# sections; each section payload is a canonical array bundle


_DTYPE_CODES = {"f8": 0, "f4": 1, "i8": 2, "u1": 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_arrays(arrays: dict) -> bytes:
    """Canonical little-endian encoding of {name: ndarray}, sorted by name."""
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _DTYPE_CODES[arr.dtype.str.lstrip("<>|=")]
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=f"<{_CODE_DTYPES[code]}").tobytes())
    return b"".join(out)


def _unpack_arrays(buf: bytes) -> dict:
    off = 0
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}q", buf, off)
        off += 8 * ndim
        dt = np.dtype(f"<{_CODE_DTYPES[code]}")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        out[name] = arr.copy()
    return out


def _grid_arrays(grids: list[GaussianGrid], dedup_sets: list[DedupMaskSet]) -> dict:
    arrays = {"n_grids": np.array([len(grids)], dtype=np.int64),
              "n_sets": np.array([len(dedup_sets)], dtype=np.int64)}
    for i, g in enumerate(grids):
        p = f"g{i}."
        arrays[p + "depth"] = g.depth.numpy()
        arrays[p + "color"] = g.color.numpy()
        arrays[p + "feature"] = g.feature.numpy()
        arrays[p + "validity"] = g.validity.numpy().astype(np.uint8)
        arrays[p + "view_mask"] = g.view.mask.numpy().astype(np.uint8)
        cam = g.view.camera
        arrays[p + "cam"] = np.concatenate([
            [cam.focal], cam.principal_point, [cam.width, cam.height],
            cam.world_to_cam.rotation, cam.world_to_cam.translation])
    for s, ds in enumerate(dedup_sets):
        for j, m in enumerate(ds.masks):
            arrays[f"d{s}.{j}"] = m.numpy().astype(np.uint8)
        arrays[f"d{s}.start"] = np.array([ds.start_view], dtype=np.int64)
    return arrays


def _grids_from_arrays(arrays: dict):
    n = int(arrays["n_grids"][0])
    grids = []
    for i in range(n):
        p = f"g{i}."
        c = arrays[p + "cam"]
        cam = Camera(focal=float(c[0]), principal_point=c[1:3].copy(),
                     resolution=(int(c[3]), int(c[4])),
                     world_to_cam=RigidPose(c[5:9].copy(), c[9:12].copy()))
        depth = torch.as_tensor(arrays[p + "depth"].copy())
        color = torch.as_tensor(arrays[p + "color"].copy())
        feature = torch.as_tensor(arrays[p + "feature"].copy())
        validity = torch.as_tensor(arrays[p + "validity"].copy()).bool()
        view_mask = torch.as_tensor(arrays[p + "view_mask"].copy()).bool()
        bundle = VirtualViewBundle(camera=cam, color=color, depth=depth,
                                   mask=view_mask, feature=feature)
        g = GaussianGrid(view=bundle, view_index=i, depth=depth.clone(),
                         color=color.clone(), feature=feature.clone(),
                         validity=validity)
        grids.append(g)
    n_sets = int(arrays["n_sets"][0])
    sets = []
    for s in range(n_sets):
        masks = [torch.as_tensor(arrays[f"d{s}.{j}"].copy()).bool() for j in range(n)]
        sets.append(DedupMaskSet(start_view=int(arrays[f"d{s}.start"][0]), masks=masks))
    return grids, sets


def save_checkpoint(path, ckpt) -> None:
    from .trainer import Checkpoint  # local import to avoid a cycle
    assert isinstance(ckpt, Checkpoint)
    sections = {
        "grids": _pack_arrays(_grid_arrays(ckpt.grids, ckpt.dedup_sets)),
        "model": _pack_arrays({k: v.numpy() for k, v in ckpt.model_state.items()}),
        "optim": _pack_arrays(ckpt.optimizer_state),
        "rng": json.dumps(ckpt.rng_state, sort_keys=True).encode(),
        "meta": json.dumps({
            "iteration": ckpt.iteration, "config_hash": ckpt.config_hash,
            "variant": ckpt.model_variant, "timesteps": ckpt.total_timesteps,
            "seed": ckpt.seed}, sort_keys=True).encode(),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in ("grids", "model", "optim", "rng", "meta"):
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", len(sections[name])))
            f.write(sections[name])
    tmp.replace(path)


def load_checkpoint(path):
    from .trainer import Checkpoint
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    sections = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (plen,) = struct.unpack_from("<Q", data, off)
        off += 8
        sections[name] = data[off:off + plen]
        off += plen
    grids, sets = _grids_from_arrays(_unpack_arrays(sections["grids"]))
    meta = json.loads(sections["meta"].decode())
    model_state = {k: torch.as_tensor(v) for k, v in
                   _unpack_arrays(sections["model"]).items()}
    return Checkpoint(
        grids=grids, dedup_sets=sets, model_variant=meta["variant"],
        model_state=model_state, optimizer_state=_unpack_arrays(sections["optim"]),
        iteration=int(meta["iteration"]), config_hash=meta["config_hash"],
        rng_state=json.loads(sections["rng"].decode()),
        total_timesteps=int(meta["timesteps"]), seed=int(meta["seed"]))
