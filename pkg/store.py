import json
import logging
import os
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from config import CODE_VERSION
from errors import StorageError

log = logging.getLogger("store")

FLOAT_FORMAT = "%.10g"


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return repr(value)


class ResultStore:
    """Output directory holding CSV tables and JSON documents."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create output directory {out_dir}: {e}") from e

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def exists(self, name):
        return os.path.exists(self.path(name))

    def write_frame(self, frame, name):
        """UTF-8 CSV, "inf"/"nan" literals, LF line endings."""
        path = self.path(name)
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="nan",
                         lineterminator="\n", encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        log.info("wrote %s (%d rows)", path, len(frame))
        return path

    def read_frame(self, name):
        path = self.path(name)
        try:
            return pd.read_csv(path, na_values=["nan"], keep_default_na=False)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e

    def write_json(self, document, name):
        path = self.path(name)
        tmp = path + ".tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(document, f, indent=2, default=_jsonable)
            os.replace(tmp, path)
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        return path

    def read_json(self, name):
        path = self.path(name)
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise StorageError(f"{path} is corrupt: {e}") from e


class RunManifest:
    """manifest.json: one entry per config hash, rewritten after every change."""

    NAME = "manifest.json"

    def __init__(self, store):
        self.store = store
        self.entries = {}
        self._load()

    def _load(self):
        if self.store.exists(self.NAME):
            data = self.store.read_json(self.NAME)
            self.entries = data.get("entries", {})
        log.info("manifest has %d entries", len(self.entries))

    def _save(self):
        self.store.write_json({"code_version": CODE_VERSION, "entries": self.entries}, self.NAME)

    def status(self, config_hash):
        return self.entries.get(config_hash, {}).get("status")

    def is_done(self, config_hash):
        return self.status(config_hash) == "done"

    def record(self, config_hash, status, **info):
        entry = self.entries.setdefault(config_hash, {})
        entry.update(info)
        entry["status"] = status
        entry["code_version"] = CODE_VERSION
        entry["updated"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._save()
        return entry
