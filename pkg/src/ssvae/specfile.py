"""JSON model-spec files.

Schema (``format`` = "ssvae-model/1")::

    {
      "format": "ssvae-model/1",
      "seed": 0,
      "data": {"c_labels": [...], "x_labels": [...], "joint": [[...], ...]}
           | {"shared_factor": {"s_count": 4, "noise_count": 2,
                                "noise_level": 0.0, "seed": 0}},
      "latents": {"z_labels": [...], "zp_labels": [...]},
      "encoder_c": {"logits": [[...]]} | {"probs": [[...]]} | {"deterministic": [k, ...]},
      "encoder_x": same as encoder_c,
      "prior": {"type": "explicit", "logits": [[...]]}
             | {"type": "mi"}
             | {"type": "infonce", "coupling":
                   {"type": "bilinear", "emb_z": [[...]], "emb_zp": [[...]], "W": [[...]]}
                 | {"type": "table", "values": [[...]]}},
      "factor": {"s_labels": [...], "joint": [[...]]}      (optional)
    }

Encoder ``probs`` rows must each sum to 1 within 1e-12; they are stored as
logits ``log(probs)`` and every entry must be positive. A ``shared_factor``
data block is expanded by the generator (its joint and factor tables are
what ``save`` writes back). ``load -> save -> load`` is value-identical:
floats are written with ``repr`` precision.
"""

import json
from importlib import resources

import numpy as np

from .errors import SpecError, SSVAEError
from .model import (
    Bilinear,
    Encoder,
    ExplicitTable,
    GeneralTable,
    InfoNCEPrior,
    MIPrior,
    ModelInstance,
    shared_factor_data,
)
from .prob import NORM_TOL, FiniteSpace, JointDistribution
from .rng import SplitMix64

FORMAT = "ssvae-model/1"
BUNDLED = ("mi_prior", "infonce_bilinear", "shared_factor")


def _matrix(obj, what):
    try:
        a = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{what}: not a numeric table ({exc})") from None
    if a.ndim != 2:
        raise SpecError(f"{what}: expected a 2-d table, got {a.ndim}-d")
    return a


def _encoder(block, given, target, what):
    if not isinstance(block, dict):
        raise SpecError(f"{what}: expected an object")
    if "deterministic" in block:
        return Encoder(given, target, block.get("logits"), deterministic=tuple(block["deterministic"]))
    if "probs" in block:
        probs = _matrix(block["probs"], f"{what}.probs")
        if probs.shape != (len(given), len(target)):
            raise SpecError(f"{what}.probs has shape {probs.shape}, expected {(len(given), len(target))}")
        for label, row in zip(given.labels, probs):
            total = row.sum()
            if abs(total - 1.0) > NORM_TOL:
                raise SpecError(f"{what} row {label!r} sums to {float(total)!r}, not 1")
            if np.any(row <= 0):
                raise SpecError(f"{what} row {label!r} has non-positive entries; use logits or a deterministic map")
        return Encoder(given, target, np.log(probs))
    if "logits" in block:
        return Encoder(given, target, _matrix(block["logits"], f"{what}.logits"))
    raise SpecError(f"{what}: needs 'logits', 'probs' or 'deterministic'")


def _prior(block):
    kind = block.get("type")
    if kind == "mi":
        return MIPrior()
    if kind == "explicit":
        return ExplicitTable(_matrix(block["logits"], "prior.logits"))
    if kind == "infonce":
        cp = block.get("coupling", {})
        if cp.get("type") == "bilinear":
            return InfoNCEPrior(Bilinear(
                _matrix(cp["emb_z"], "coupling.emb_z"),
                _matrix(cp["emb_zp"], "coupling.emb_zp"),
                _matrix(cp["W"], "coupling.W"),
            ))
        if cp.get("type") == "table":
            return InfoNCEPrior(GeneralTable(_matrix(cp["values"], "coupling.values")))
        raise SpecError(f"unknown coupling type {cp.get('type')!r}")
    raise SpecError(f"unknown prior type {kind!r}")


def from_dict(doc):
    """Build a ModelInstance from a parsed spec document; raises SpecError."""
    try:
        if doc.get("format", FORMAT) != FORMAT:
            raise SpecError(f"unsupported format {doc.get('format')!r}")
        data = doc["data"]
        factor = None
        if "shared_factor" in data:
            g = data["shared_factor"]
            joint, factor = shared_factor_data(
                int(g["s_count"]), int(g["noise_count"]), float(g["noise_level"]), SplitMix64(int(g.get("seed", 0)))
            )
        else:
            cs = FiniteSpace(tuple(data["c_labels"]))
            xs = FiniteSpace(tuple(data["x_labels"]))
            joint = JointDistribution(cs, xs, _matrix(data["joint"], "data.joint"))
        if "factor" in doc:
            f = doc["factor"]
            factor = JointDistribution(FiniteSpace(tuple(f["s_labels"])), joint.row_space, _matrix(f["joint"], "factor.joint"))
        lat = doc["latents"]
        zs = FiniteSpace(tuple(lat["z_labels"]))
        zps = FiniteSpace(tuple(lat["zp_labels"]))
        enc_c = _encoder(doc["encoder_c"], joint.row_space, zs, "encoder_c")
        enc_x = _encoder(doc["encoder_x"], joint.col_space, zps, "encoder_x")
        return ModelInstance(joint, enc_c, enc_x, _prior(doc["prior"]), factor_joint=factor)
    except SpecError:
        raise
    except KeyError as exc:
        raise SpecError(f"missing field {exc}") from None
    except (SSVAEError, ValueError, TypeError, AttributeError) as exc:
        raise SpecError(str(exc)) from None


def _tolist(a):
    return [[float(v) for v in row] for row in np.asarray(a)]


def _encoder_dict(enc):
    if enc.is_deterministic:
        return {"deterministic": list(enc.deterministic)}
    return {"logits": _tolist(enc.logits)}


def to_dict(inst, seed=0):
    D = inst.data_joint
    doc = {
        "format": FORMAT,
        "seed": int(seed),
        "data": {
            "c_labels": list(D.row_space.labels),
            "x_labels": list(D.col_space.labels),
            "joint": _tolist(D.probs),
        },
        "latents": {"z_labels": list(inst.z_space.labels), "zp_labels": list(inst.zp_space.labels)},
        "encoder_c": _encoder_dict(inst.encoder_c),
        "encoder_x": _encoder_dict(inst.encoder_x),
    }
    p = inst.prior
    if isinstance(p, MIPrior):
        doc["prior"] = {"type": "mi"}
    elif isinstance(p, ExplicitTable):
        doc["prior"] = {"type": "explicit", "logits": _tolist(p.logits)}
    else:
        cp = p.coupling
        if isinstance(cp, Bilinear):
            c = {"type": "bilinear", "emb_z": _tolist(cp.emb_z), "emb_zp": _tolist(cp.emb_zp), "W": _tolist(cp.W)}
        else:
            c = {"type": "table", "values": _tolist(cp.values)}
        doc["prior"] = {"type": "infonce", "coupling": c}
    if inst.factor_joint is not None:
        doc["factor"] = {"s_labels": list(inst.factor_joint.row_space.labels), "joint": _tolist(inst.factor_joint.probs)}
    return doc


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecError("spec must be a JSON object")
    return from_dict(doc), int(doc.get("seed", 0))


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from None
    return loads(text)


def dumps(inst, seed=0):
    return json.dumps(to_dict(inst, seed), indent=1) + "\n"


def save(inst, path, seed=0):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(inst, seed))


def bundled_spec(name):
    """Path of a spec shipped with the package (one of ``BUNDLED``)."""
    if name not in BUNDLED:
        raise SpecError(f"no bundled spec {name!r}; choose from {', '.join(BUNDLED)}")
    return str(resources.files("ssvae") / "data" / f"{name}.json")
