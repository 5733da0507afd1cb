"""On-disk dataset layout.

A dataset directory holds ``template.obj``, one mask file per label under
``masks/``, per-sequence ``<name>.features.ottk`` (T_a, F) and
``<name>.targets.ottk`` (T, N, 3) under ``sequences/``, and a
``dataset.json`` listing the samples.  Any real corpus converted to this
layout can be used in place of the synthetic one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .mesh import MeshError, TriangleMesh, load_mask, load_obj, save_mask, save_obj
from .model import SequenceSample
from .ottk import load_tensor, read_json, save_tensor, write_json
from .train import AUDIO_RATE, FPS, synth_dataset

DATASET_FORMAT = "meshanim-dataset/1"


@dataclass(frozen=True, eq=False)
class Dataset:
    template: TriangleMesh
    samples: list
    masks: dict
    meta: dict


def save_dataset(directory, template, samples, masks, meta=None) -> dict:
    directory = Path(directory)
    (directory / "sequences").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(exist_ok=True)
    save_obj(template, directory / "template.obj")
    mask_files = {}
    for label, mask in masks.items():
        rel = f"masks/{label}.txt"
        save_mask(mask, directory / rel)
        mask_files[label] = rel
    entries = []
    for s in samples:
        feat = f"sequences/{s.name}.features.ottk"
        targ = f"sequences/{s.name}.targets.ottk"
        save_tensor(s.features, directory / feat)
        save_tensor(s.targets, directory / targ)
        entries.append({"name": s.name, "features": feat, "targets": targ, "frames": s.n_frames,
                        "feature_rows": len(s.features), "fps": s.fps})
    manifest = {"format": DATASET_FORMAT, "template": "template.obj", "masks": mask_files,
                "samples": entries, "meta": meta or {}}
    write_json(manifest, directory / "dataset.json")
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_json(directory / "dataset.json")
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    template = load_obj(directory / manifest["template"])
    masks = {label: load_mask(directory / rel) for label, rel in manifest["masks"].items()}
    for m in masks.values():
        m.check(template.n_vertices)
    samples = []
    for e in manifest["samples"]:
        targets = load_tensor(directory / e["targets"])
        if targets.ndim != 3 or targets.shape[1] != template.n_vertices:
            raise MeshError(f"sample {e['name']}: targets {targets.shape} do not match template "
                            f"with {template.n_vertices} vertices")
        samples.append(SequenceSample(template, load_tensor(directory / e["features"]), targets,
                                      e.get("fps", FPS), e["name"]))
    return Dataset(template, samples, masks, manifest.get("meta", {}))


def parse_synth_spec(spec: str) -> dict:
    """``synth:seed=1,n=8,frames=16`` -> keyword arguments for ``synth_dataset``."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    names = {"seed": "seed", "n": "n_sequences", "sequences": "n_sequences", "frames": "frames_per_seq",
             "fps": "fps"}
    out = {}
    for part in filter(None, body.split(",")):
        key, _, value = part.partition("=")
        if key not in names or not value:
            raise ValueError(f"bad synthetic data option {part!r}; expected seed=, n=, frames=, fps=")
        out[names[key]] = float(value) if key == "fps" else int(value)
    return out


def open_dataset(spec) -> Dataset:
    """A dataset directory, or ``synth:...`` for an in-memory synthetic set."""
    spec = str(spec)
    if spec.startswith("synth"):
        kwargs = parse_synth_spec(spec)
        ds = synth_dataset(**kwargs)
        meta = {"source": "synthetic", **kwargs, "audio_rate": AUDIO_RATE}
        return Dataset(ds.template, ds.samples, ds.masks, meta)
    return load_dataset(spec)
