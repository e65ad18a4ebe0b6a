#!/usr/bin/env python3
"""Convert COCO / COCO-Stuff annotations to the plgan annotation format.

Reads one or more COCO-style JSON files (for example instances_train2017.json
and stuff_train2017.json), maps categories to the taxonomy by name, writes one
mask PNG per object and an annotations.json next to them. Images are referenced
in place, relative to the output directory.

    python3 scripts/coco_to_plgan.py \
        --annotations instances_val2017.json stuff_val2017.json \
        --images val2017 --taxonomy assets/taxonomy/coco_stuff.json \
        --split val --out data/coco_val
"""

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image, ImageDraw


def decode_counts(counts):
    """COCO compressed RLE string to run lengths."""
    runs, i = [], 0
    while i < len(counts):
        x, k, more = 0, 0, True
        while more:
            c = ord(counts[i]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            i += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(runs) > 2:
            x += runs[-2]
        runs.append(x)
    return runs


def rle_mask(seg, h, w):
    counts = seg["counts"]
    runs = decode_counts(counts) if isinstance(counts, str) else counts
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, value = 0, 0
    for r in runs:
        flat[pos:pos + r] = value
        pos += r
        value ^= 1
    # column-major in COCO
    return flat.reshape(w, h).T


def polygon_mask(polys, h, w):
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    for p in polys:
        if len(p) >= 6:
            draw.polygon(list(zip(p[0::2], p[1::2])), fill=1)
    return np.array(img, dtype=np.uint8)


def object_mask(ann, h, w):
    seg = ann["segmentation"]
    if isinstance(seg, list):
        return polygon_mask(seg, h, w)
    return rle_mask(seg, h, w)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--annotations", nargs="+", required=True)
    ap.add_argument("--images", required=True, help="directory holding the COCO images")
    ap.add_argument("--taxonomy", required=True)
    ap.add_argument("--split", default="train", choices=["train", "val", "test"])
    ap.add_argument("--out", required=True)
    ap.add_argument("--limit", type=int, default=0, help="stop after this many images (0 = all)")
    args = ap.parse_args()

    with open(args.taxonomy) as f:
        taxonomy = json.load(f)["categories"]
    by_name = {c["name"]: c["id"] for c in taxonomy}

    images, objects = {}, {}
    for path in args.annotations:
        with open(path) as f:
            coco = json.load(f)
        remap = {}
        for c in coco["categories"]:
            name = c["name"]
            if name in by_name:
                remap[c["id"]] = by_name[name]
            elif name != "other":
                print(f"skipping unknown category {name!r}", file=sys.stderr)
        for img in coco["images"]:
            images[img["id"]] = img
        for ann in coco["annotations"]:
            if ann.get("iscrowd", 0) or ann["category_id"] not in remap:
                continue
            objects.setdefault(ann["image_id"], []).append((remap[ann["category_id"]], ann))

    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    entries = []
    for n, (image_id, anns) in enumerate(sorted(objects.items())):
        if args.limit and n >= args.limit:
            break
        img = images[image_id]
        h, w = img["height"], img["width"]
        stem = os.path.splitext(img["file_name"])[0]
        out_objects = []
        for k, (category, ann) in enumerate(anns):
            x, y, bw, bh = ann["bbox"]
            bbox = {
                "cx": min(max((x + bw / 2) / w, 0.0), 1.0),
                "cy": min(max((y + bh / 2) / h, 0.0), 1.0),
                "h": min(bh / h, 1.0),
                "w": min(bw / w, 1.0),
            }
            mask_rel = f"masks/{stem}_{k}.png"
            Image.fromarray(object_mask(ann, h, w) * 255).save(os.path.join(args.out, mask_rel))
            out_objects.append({"category": category, "bbox": bbox, "mask": mask_rel})
        file_rel = os.path.relpath(os.path.join(args.images, img["file_name"]), args.out)
        entries.append({"id": stem, "file": file_rel, "split": args.split, "objects": out_objects})

    with open(os.path.join(args.out, "annotations.json"), "w") as f:
        json.dump({"images": entries}, f, indent=1)
    print(f"wrote {len(entries)} images to {args.out}")


if __name__ == "__main__":
    main()
