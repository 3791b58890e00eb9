#!/usr/bin/env python3
"""Writes fixtures/emoji/stats.txt by counting the manifest directly."""

import json
import sys
from collections import Counter
from pathlib import Path

manifest = Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures/emoji/manifest.jsonl")
captions = [json.loads(line)["caption"] for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
words = Counter(len(c.split()) for c in captions)

lines = [f"records {len(captions)}", f"unique_captions {len(set(captions))}"]
lines += [f"words {k} {words[k]}" for k in sorted(words)]
(manifest.parent / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
print("\n".join(lines))
