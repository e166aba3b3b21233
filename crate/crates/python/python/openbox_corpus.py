"""Writes story records in the corpus line format read by ``assocscan``.

The open-box (hidden-state patching) generator lives outside this repository.
Whatever produces the stories, it hands them to :func:`emit_corpus_records`
so the Rust pipeline can load them with ``load_records``.
"""

import datetime
import hashlib
import json

SETTING = "open-box"


def record_id(prompt, model_id, replicate_index):
    h = hashlib.sha256()
    h.update(prompt.encode())
    h.update(b"\x1f")
    h.update(model_id.encode())
    h.update(b"\x1f")
    h.update(str(replicate_index).encode())
    return h.hexdigest()[:32]


def make_record(prompt, model_id, story_text, *, category, location,
                location_category, descriptors, replicate_index,
                setting=SETTING, created_at=None):
    if not story_text.strip():
        raise ValueError("story_text is empty")
    if created_at is None:
        created_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return {
        "id": record_id(prompt, model_id, replicate_index),
        "setting": setting,
        "category": category,
        "location": location,
        "location_category": location_category,
        "descriptors": list(descriptors),
        "replicate_index": replicate_index,
        "prompt": prompt,
        "model_id": model_id,
        "story_text": story_text,
        "created_at": created_at,
    }


def emit_corpus_records(records, path):
    """Writes one JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")
