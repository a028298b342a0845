"""Content-addressed on-disk cache for datasets, models and reports.

Keys are hashes of everything that determines an artifact, never
timestamps. Writes go to a temporary name first and are renamed into place,
so concurrent writers of the same key cannot leave a torn entry.
"""
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..dataset import Dataset
from ..training import config_hash, load_model, save_model


def default_root():
    return Path(os.environ.get("BAATBENCH_CACHE", Path.home() / ".cache" / "baatbench"))


def key(*parts):
    return config_hash(list(parts))


class Cache:
    def __init__(self, root=None, enabled=True):
        self.root = Path(root) if root is not None else default_root()
        self.enabled = enabled
        self.hits = 0
        self.misses = 0

    def _path(self, kind, k, suffix):
        return self.root / kind / f"{k}{suffix}"

    def _atomic(self, target, write):
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        os.close(fd)
        try:
            write(tmp)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)

    def _count(self, hit):
        if hit:
            self.hits += 1
        else:
            self.misses += 1
        return hit

    # datasets -------------------------------------------------------------
    def get_dataset(self, k):
        p = self._path("datasets", k, ".npz")
        if not self.enabled or not self._count(p.exists()):
            return None
        with np.load(p, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            return Dataset(meta["name"], z["images"], z["labels"], meta["num_classes"], meta["split"],
                           meta.get("notes", {}))

    def put_dataset(self, k, ds: Dataset):
        if not self.enabled:
            return
        meta = json.dumps({"name": ds.name, "num_classes": ds.num_classes, "split": ds.split,
                           "notes": ds.notes}, default=str)

        def write(tmp):
            with open(tmp, "wb") as f:
                np.savez(f, images=ds.images, labels=ds.labels, meta=np.array(meta))
        self._atomic(self._path("datasets", k, ".npz"), write)

    # arrays ---------------------------------------------------------------
    def get_array(self, k):
        p = self._path("arrays", k, ".npy")
        if not self.enabled or not self._count(p.exists()):
            return None
        return np.load(p, allow_pickle=False)

    def put_array(self, k, arr):
        if not self.enabled:
            return

        def write(tmp):
            with open(tmp, "wb") as f:
                np.save(f, np.asarray(arr))
        self._atomic(self._path("arrays", k, ".npy"), write)

    # models ---------------------------------------------------------------
    def get_model(self, k):
        p = self._path("models", k, ".pt")
        if not self.enabled or not self._count(p.exists() and Path(str(p) + ".json").exists()):
            return None
        return load_model(p)

    def put_model(self, k, trained, extra=None):
        if not self.enabled:
            return
        p = self._path("models", k, ".pt")
        # sidecar first: an entry counts only once the state dict exists too
        tmp_dir = Path(tempfile.mkdtemp(dir=self.root))
        try:
            save_model(trained, tmp_dir / "m.pt", extra)
            p.parent.mkdir(parents=True, exist_ok=True)
            os.replace(tmp_dir / "m.pt.json", str(p) + ".json")
            os.replace(tmp_dir / "m.pt", p)
        finally:
            for f in tmp_dir.iterdir():
                f.unlink()
            tmp_dir.rmdir()

    # json -----------------------------------------------------------------
    def get_json(self, kind, k):
        p = self._path(kind, k, ".json")
        if not self.enabled or not self._count(p.exists()):
            return None
        with open(p, encoding="utf-8") as f:
            return json.load(f)

    def put_json(self, kind, k, obj):
        if not self.enabled:
            return

        def write(tmp):
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(obj, f, indent=1, default=_default)
        self._atomic(self._path(kind, k, ".json"), write)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)
