"""Dataset plumbing: JSON manifests, listener tables, prediction CSVs and
the flat `key = value` config format used for model/train configs and
checkpoint sidecars.

A manifest lists utterances with their labels, listener, scene and feature
file paths. Loading a dataset streams one utterance at a time: each bundle
is read, layer-selected and time-pooled immediately, so only the compact
model-ready arrays stay in memory.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from .conditioning import ListenerProfile, Severity
from .dsp import read_bundle
from .errors import ConfigError, DataError, FormatError
from .model import ModelConfig, PreparedUtterance, prepare_bundle
from .training import TrainConfig

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, utterances: list[dict], seed: int | None = None,
                   dataset: str = "synthetic") -> None:
    doc = {"manifest_version": MANIFEST_VERSION, "dataset": dataset, "utterances": utterances}
    if seed is not None:
        doc["seed"] = seed
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_manifest(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from None
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: manifest_version {doc.get('manifest_version')!r}, "
                          f"expected {MANIFEST_VERSION}")
    utts = doc.get("utterances")
    if not isinstance(utts, list) or not utts:
        raise DataError(f"{path}: manifest has no utterances")
    seen = set()
    for u in utts:
        for key in ("utterance_id", "listener_id", "streams"):
            if key not in u:
                raise DataError(f"{path}: utterance entry missing '{key}': {u}")
        if u["utterance_id"] in seen:
            raise DataError(f"{path}: duplicate utterance_id '{u['utterance_id']}'")
        seen.add(u["utterance_id"])
        label = u.get("label")
        if label is not None and not 0.0 <= float(label) <= 100.0:
            raise DataError(f"{path}: utterance {u['utterance_id']} label {label} "
                            f"outside [0, 100]")
    return doc


def write_listeners(path, profiles: dict[str, ListenerProfile]) -> None:
    rows = [{
        "listener_id": p.listener_id,
        "severity": p.severity.name.lower(),
        "audiogram_left": [float(x) for x in p.audiogram_left],
        "audiogram_right": [float(x) for x in p.audiogram_right],
    } for p in (profiles[k] for k in sorted(profiles))]
    with open(path, "w") as f:
        json.dump({"listeners": rows}, f, indent=1)
        f.write("\n")


def load_listeners(path) -> dict[str, ListenerProfile]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from None
    rows = doc.get("listeners")
    if not isinstance(rows, list) or not rows:
        raise DataError(f"{path}: no listeners")
    profiles = {}
    for r in rows:
        try:
            p = ListenerProfile(r["listener_id"], Severity.from_name(r["severity"]),
                                np.array(r["audiogram_left"]), np.array(r["audiogram_right"]))
        except KeyError as e:
            raise DataError(f"{path}: listener entry missing {e}") from None
        if p.listener_id in profiles:
            raise DataError(f"{path}: duplicate listener_id '{p.listener_id}'")
        profiles[p.listener_id] = p
    return profiles


def load_dataset(manifest_path, cfg: ModelConfig,
                 listeners_path=None) -> tuple[list[PreparedUtterance], dict[str, ListenerProfile]]:
    """Load a manifest into model-ready utterances plus listener profiles.

    listeners_path defaults to `listeners.json` next to the manifest.
    Feature paths inside the manifest are resolved relative to it.
    """
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    base = manifest_path.parent
    if listeners_path is None:
        listeners_path = base / "listeners.json"
    profiles = load_listeners(listeners_path)

    def resolve(entry: dict) -> dict:
        return {"sfm": [str(base / p) for p in entry["sfm"]],
                "logmel": str(base / entry["logmel"])}

    utts = []
    for u in doc["utterances"]:
        if u["listener_id"] not in profiles:
            raise DataError(f"utterance {u['utterance_id']}: unknown listener "
                            f"'{u['listener_id']}'")
        paths = {name: resolve(entry) for name, entry in u["streams"].items()}
        bundle = read_bundle(u["utterance_id"], paths)
        label = float(u["label"]) if u.get("label") is not None else None
        prep = prepare_bundle(bundle, cfg, u["listener_id"], label)
        prep.scene_id = u.get("scene_id", "")
        prep.system_id = u.get("system_id", "")
        utts.append(prep)
    return utts, profiles


# ---------------------------------------------------------------------------
# prediction CSVs


PREDICTION_COLUMNS = ("utterance_id", "listener_id", "scene_id", "system_id",
                      "label", "score_left", "score_right", "prediction")


def write_predictions_csv(path, rows: list[dict]) -> None:
    """Rows carry the PREDICTION_COLUMNS keys; floats are written with six
    decimals so identical runs produce identical bytes."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PREDICTION_COLUMNS)
        for r in rows:
            label = "" if r.get("label") is None else f"{float(r['label']):.6f}"
            w.writerow([r["utterance_id"], r["listener_id"], r.get("scene_id", ""),
                        r.get("system_id", ""), label,
                        f"{float(r['score_left']):.6f}", f"{float(r['score_right']):.6f}",
                        f"{float(r['prediction']):.6f}"])


def read_predictions_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(PREDICTION_COLUMNS):
            raise FormatError(f"{path}: unexpected header {header}")
        rows = []
        for line in reader:
            if len(line) != len(PREDICTION_COLUMNS):
                raise FormatError(f"{path}: row has {len(line)} fields: {line}")
            rows.append({
                "utterance_id": line[0], "listener_id": line[1], "scene_id": line[2],
                "system_id": line[3],
                "label": float(line[4]) if line[4] else None,
                "score_left": float(line[5]), "score_right": float(line[6]),
                "prediction": float(line[7]),
            })
        return rows


# ---------------------------------------------------------------------------
# flat key = value configs


def format_kv(values: dict) -> str:
    lines = []
    for key, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def _coerce(field: dataclasses.Field, raw: str, source: str):
    t = field.type
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if t.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(","))
        if t.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(","))
        if t.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{source}: cannot parse '{raw}' for field '{field.name}' ({t})") from None


def _config_from_kv(cls, values: dict[str, str], source: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"{source}: unknown key '{key}' for {cls.__name__}")
        kwargs[key] = _coerce(fields[key], raw, source)
    return cls(**kwargs)


def config_to_kv(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_model_config(path) -> ModelConfig:
    with open(path) as f:
        return _config_from_kv(ModelConfig, parse_kv(f.read(), str(path)), str(path))


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return _config_from_kv(TrainConfig, parse_kv(f.read(), str(path)), str(path))


def save_config(path, cfg) -> None:
    with open(path, "w") as f:
        f.write(format_kv(config_to_kv(cfg)))


def save_sidecar(path, values: dict) -> None:
    """Checkpoint sidecar: fold, best epoch, validation RMSE, the full model
    config under model.*, and conditioning stats under stats.*."""
    with open(path, "w") as f:
        f.write(format_kv(values))


def load_sidecar(path) -> dict[str, str]:
    with open(path) as f:
        return parse_kv(f.read(), str(path))
