#!/usr/bin/env python3
"""Write precomputed image features in the ctxopt dataset format.

Input is a JSON file:

    {"class_names": ["dog", ...], "template": "a photo of a [CLASS].",
     "train": [[label, [f0, f1, ...]], ...], "val": [...], "test": [...]}

`template` and `val` are optional. Only the standard library is used.
"""

import hashlib
import json
import struct
import sys


def block(fmt, values):
    return struct.pack("<%d%s" % (len(values), fmt), *values)


def export(spec, out_path):
    rows = []
    sizes = {}
    for split in ("train", "val", "test"):
        part = spec.get(split, [])
        sizes[split] = len(part)
        rows.extend(part)
    if not rows:
        raise SystemExit("no samples")
    dim = len(rows[0][1])
    if any(len(f) != dim for _, f in rows):
        raise SystemExit("feature rows differ in length")
    k = len(spec["class_names"])
    if any(not 0 <= label < k for label, _ in rows):
        raise SystemExit("label out of range")

    features = block("f", [x for _, f in rows for x in f])
    labels = block("I", [label for label, _ in rows])
    meta = {
        "dim": dim,
        "num_samples": len(rows),
        "class_names": spec["class_names"],
        "template": spec.get("template"),
        "splits": sizes,
    }
    header = {
        "format": "ctxopt",
        "version": 1,
        "kind": "dataset",
        "meta": meta,
        "entries": [
            {"name": "features", "dtype": "f32", "shape": [len(rows), dim], "offset": 0,
             "sha256": hashlib.sha256(features).hexdigest()},
            {"name": "labels", "dtype": "u32", "shape": [len(rows)], "offset": len(features),
             "sha256": hashlib.sha256(labels).hexdigest()},
        ],
    }
    # Meta keys sorted, no spaces, raw UTF-8: the same bytes `ctxopt ingest` writes.
    header["meta"] = json.loads(json.dumps(meta, sort_keys=True))
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode()
    with open(out_path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(features)
        f.write(labels)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit("usage: export_features.py features.json out.bin")
    with open(sys.argv[1]) as f:
        export(json.load(f), sys.argv[2])
