#!/usr/bin/env python3
"""Regenerates the committed fixtures under fixtures/.

emoji/         64 RGBA 64x64 emoji-style drawings, manifest.jsonl
segmentation/  disk, ring-with-hole and border-touching test images, their
               golden masks (computed with scipy connected components) and
               the hard-composed RGBA golden for the disk

Run from the repository root:  python3 tools/make_fixtures.py
Then:                           python3 tools/count_stats.py
"""

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SIDE = 64
ROOT = Path(__file__).resolve().parent.parent / "fixtures"

YX = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64) + 0.5
Y, X = YX[0], YX[1]

OUTLINE = (70, 70, 70)
BLACK = (25, 25, 25)
WHITE = (255, 255, 255)


def disk(cx, cy, r):
    return (X - cx) ** 2 + (Y - cy) ** 2 <= r * r


def ellipse(cx, cy, rx, ry):
    return ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 <= 1.0


def rect(x0, y0, x1, y1):
    return (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)


def polygon(points):
    inside = np.zeros((SIDE, SIDE), dtype=bool)
    n = len(points)
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        crosses = (y1 > Y) != (y2 > Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (Y - y1) / (y2 - y1) + x1
        inside ^= crosses & (X < xint)
    return inside


def star(cx, cy, r, inner=0.45, points=5):
    pts = []
    for i in range(points * 2):
        rr = r if i % 2 == 0 else r * inner
        a = -math.pi / 2 + i * math.pi / points
        pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
    return polygon(pts)


def heart(cx, cy, s):
    lobes = disk(cx - s * 0.5, cy - s * 0.3, s * 0.55) | disk(cx + s * 0.5, cy - s * 0.3, s * 0.55)
    tip = polygon([(cx - s * 1.02, cy - s * 0.12), (cx + s * 1.02, cy - s * 0.12), (cx, cy + s * 1.05)])
    return lobes | tip


def arc(cx, cy, r, width, lower=True):
    ring = disk(cx, cy, r) & ~disk(cx, cy, r - width)
    return ring & ((Y > cy) if lower else (Y < cy))


def outline(mask, width=2):
    return ndimage.binary_dilation(mask, iterations=width) & ~mask


class Canvas:
    def __init__(self):
        self.rgb = np.full((SIDE, SIDE, 3), 255, dtype=np.uint8)
        self.alpha = np.zeros((SIDE, SIDE), dtype=bool)

    def paint(self, mask, color, opaque=True):
        self.rgb[mask] = color
        if opaque:
            self.alpha |= mask

    def image(self):
        a = np.where(self.alpha, 255, 0).astype(np.uint8)
        rgb = np.where(self.alpha[..., None], self.rgb, 0).astype(np.uint8)
        return Image.fromarray(np.dstack([rgb, a]), "RGBA")


def face(c, cx, cy, r, color, mood):
    c.paint(disk(cx, cy, r), color)
    ex = r * 0.38
    for sx in (-1, 1):
        if mood == "wink" and sx == 1:
            c.paint(rect(cx + ex - 4, cy - r * 0.3 - 1, cx + ex + 4, cy - r * 0.3 + 1), BLACK)
        else:
            c.paint(ellipse(cx + sx * ex, cy - r * 0.3, 2.5, 4), BLACK)
    if mood == "sad":
        c.paint(arc(cx, cy + r * 0.75, r * 0.45, 3, lower=False), BLACK)
        c.paint(heart(cx + ex, cy + 1, 2.5) & ~disk(cx + ex, cy - 3, 2), (60, 140, 240))
    else:
        c.paint(arc(cx, cy + r * 0.05, r * 0.55, 3, lower=True), BLACK)


def draw(kind, variant, rng):
    c = Canvas()
    cx = 32 + rng.uniform(-3, 3)
    cy = 32 + rng.uniform(-3, 3)
    s = rng.uniform(0.9, 1.05)
    if kind == "smile":
        color = [(250, 205, 40), (250, 205, 40), (245, 180, 30), (250, 215, 60)][variant]
        face(c, cx, cy, 25 * s, color, "wink" if variant == 3 else "smile")
    elif kind == "sad":
        face(c, cx, cy, 25 * s, (250, 205, 40), "sad")
    elif kind == "heart":
        color = [(220, 30, 50), (40, 170, 70), (40, 80, 220), (230, 60, 140)][variant]
        c.paint(heart(cx, cy, 21 * s), color)
        if variant == 3:
            c.paint(polygon([(cx - 2, cy - 16), (cx + 3, cy - 4), (cx - 2, cy + 6), (cx + 1, cy + 18),
                             (cx - 3, cy + 6), (cx + 1, cy - 4)]), WHITE)
    elif kind == "cat":
        fur = [(240, 140, 40), (240, 140, 40), (130, 130, 140), (120, 60, 160)][variant]
        r = 21 * s
        ears = polygon([(cx - r, cy - 4), (cx - r * 0.85, cy - r * 1.35), (cx - r * 0.2, cy - r * 0.8)]) | \
            polygon([(cx + r, cy - 4), (cx + r * 0.85, cy - r * 1.35), (cx + r * 0.2, cy - r * 0.8)])
        c.paint(ears | disk(cx, cy + 3, r), fur)
        c.paint(ellipse(cx, cy + r * 0.45, r * 0.5, r * 0.35), WHITE)
        for sx in (-1, 1):
            c.paint(ellipse(cx + sx * r * 0.4, cy - r * 0.1, 3, 4), (60, 180, 60))
        c.paint(disk(cx, cy + r * 0.3, 2.5), (230, 100, 130))
        if variant == 3:
            c.paint(rect(cx - r * 0.75, cy - r * 0.3, cx + r * 0.75, cy + r * 0.05) & ~(
                ellipse(cx - r * 0.4, cy - r * 0.1, 3, 4) | ellipse(cx + r * 0.4, cy - r * 0.1, 3, 4)), BLACK)
    elif kind == "star":
        color = [(250, 205, 40), (250, 205, 40), (245, 140, 30), (250, 220, 80)][variant]
        c.paint(star(cx, cy + 2, 28 * s), color)
        if variant == 3:
            for sx in (-1, 1):
                c.paint(ellipse(cx + sx * 5, cy, 2, 3.5), BLACK)
    elif kind == "apple":
        color = [(210, 35, 35), (210, 35, 35), (110, 190, 60), (200, 40, 40)][variant]
        c.paint(disk(cx - 7 * s, cy + 4, 17 * s) | disk(cx + 7 * s, cy + 4, 17 * s), color)
        c.paint(rect(cx - 1.5, cy - 20 * s, cx + 1.5, cy - 8 * s), (110, 70, 30))
        c.paint(ellipse(cx + 7, cy - 17 * s, 7, 3.5), (50, 150, 50))
    elif kind == "sun":
        r = 15 * s
        rays = np.zeros((SIDE, SIDE), dtype=bool)
        for i in range(8):
            a = i * math.pi / 4 + variant * 0.1
            tip = (cx + 29 * s * math.cos(a), cy + 29 * s * math.sin(a))
            l = (cx + r * math.cos(a - 0.35), cy + r * math.sin(a - 0.35))
            rr = (cx + r * math.cos(a + 0.35), cy + r * math.sin(a + 0.35))
            rays |= polygon([tip, l, rr])
        c.paint(rays, (250, 160, 30))
        c.paint(disk(cx, cy, r), (250, 210, 40))
    elif kind == "cloud":
        body = disk(cx - 11 * s, cy + 4, 11 * s) | disk(cx + 2, cy - 4, 14 * s) | \
            disk(cx + 14 * s, cy + 5, 10 * s) | rect(cx - 11 * s, cy + 4, cx + 14 * s, cy + 14 * s)
        fill = (150, 150, 165) if variant == 3 else WHITE
        c.paint(outline(body), OUTLINE)
        c.paint(body, fill)
        if variant == 3:
            c.paint(polygon([(cx, cy + 10), (cx + 6, cy + 10), (cx + 1, cy + 20), (cx + 9, cy + 20),
                             (cx - 4, cy + 31), (cx - 1, cy + 22), (cx - 7, cy + 22)]), (250, 210, 40))
    elif kind == "drop":
        color = [(50, 120, 230), (50, 120, 230), (30, 70, 200), (80, 160, 240)][variant]
        c.paint(disk(cx, cy + 8, 17 * s) | polygon([(cx, cy - 27 * s), (cx - 15.5 * s, cy + 1), (cx + 15.5 * s, cy + 1)]), color)
        c.paint(ellipse(cx - 7, cy + 6, 3, 6), WHITE)
    elif kind == "fire":
        outer = disk(cx, cy + 9, 17 * s) | polygon([(cx + 3, cy - 28 * s), (cx - 16 * s, cy + 3), (cx + 16 * s, cy + 3)])
        c.paint(outer, (240, 110, 30))
        c.paint(disk(cx, cy + 14, 9 * s) | polygon([(cx, cy - 6), (cx - 8.5 * s, cy + 12), (cx + 8.5 * s, cy + 12)]), (250, 210, 50))
        if variant == 2:
            c.paint(rect(cx - 20, cy + 25, cx + 20, cy + 29), (120, 70, 30))
    elif kind == "ball":
        r = 24 * s
        body = disk(cx, cy, r)
        if variant == 1:
            c.paint(outline(body), BLACK)
            c.paint(body, WHITE)
            c.paint(star(cx, cy, 9, inner=0.8), BLACK)
            for i in range(5):
                a = -math.pi / 2 + i * 2 * math.pi / 5
                c.paint(disk(cx + r * 0.95 * math.cos(a), cy + r * 0.95 * math.sin(a), 5) & body, BLACK)
        else:
            color = [(220, 40, 40), None, (220, 40, 40), (40, 90, 220)][variant]
            c.paint(body, color)
            c.paint(body & (np.abs(Y - cy) < 4), (250, 210, 40))
    elif kind == "flower":
        petal = [(230, 60, 60), WHITE, (220, 30, 40), (240, 130, 180)][variant]
        petals = np.zeros((SIDE, SIDE), dtype=bool)
        for i in range(6):
            a = i * math.pi / 3
            petals |= disk(cx + 15 * s * math.cos(a), cy + 15 * s * math.sin(a), 10 * s)
        if variant == 1:
            c.paint(outline(petals), OUTLINE)
        c.paint(petals, petal)
        c.paint(disk(cx, cy, 8 * s), (250, 200, 40))
    elif kind == "house":
        roof = [(170, 90, 50), (170, 90, 50), (210, 40, 40), (210, 40, 40)][variant]
        walls = [(230, 200, 140), (230, 200, 140), (230, 80, 60), (240, 220, 170)][variant]
        c.paint(rect(cx - 19 * s, cy - 3, cx + 19 * s, cy + 25 * s), walls)
        c.paint(polygon([(cx - 26 * s, cy - 2), (cx + 26 * s, cy - 2), (cx, cy - 27 * s)]), roof)
        c.paint(rect(cx - 5, cy + 9, cx + 5, cy + 25 * s), (110, 70, 30))
    elif kind == "tree":
        if variant == 1:
            crown = polygon([(cx, cy - 29 * s), (cx - 14 * s, cy - 6), (cx + 14 * s, cy - 6)]) | \
                polygon([(cx, cy - 18 * s), (cx - 21 * s, cy + 14), (cx + 21 * s, cy + 14)])
            c.paint(rect(cx - 3, cy + 13, cx + 3, cy + 26), (110, 70, 30))
            c.paint(crown, (30, 130, 60))
        else:
            c.paint(rect(cx - 4, cy + 5, cx + 4, cy + 28), (110, 70, 30))
            green = [(50, 160, 60), None, (40, 180, 70), (60, 150, 50)][variant]
            c.paint(disk(cx, cy - 6, 20 * s), green)
    elif kind == "moon":
        color = [(245, 215, 80), (245, 215, 80), (250, 220, 40), (235, 205, 90)][variant]
        c.paint(disk(cx, cy, 24 * s) & ~disk(cx + 11 * s, cy - 6 * s, 20 * s), color)
    elif kind == "ghost":
        body = disk(cx, cy - 4, 19 * s) | rect(cx - 19 * s, cy - 4, cx + 19 * s, cy + 20 * s)
        for i in range(4):
            body &= ~disk(cx - 14.25 * s + i * 9.5 * s, cy + 23 * s, 3.6 * s)
        c.paint(outline(body), OUTLINE)
        c.paint(body, WHITE)
        for sx in (-1, 1):
            c.paint(ellipse(cx + sx * 7, cy - 6, 3, 4.5), BLACK)
        if variant == 3:
            c.paint(ellipse(cx, cy + 6, 4, 3), BLACK)
    return c.image()


CAPTIONS = {
    "smile": ["смайлик", "улыбающийся смайлик", "веселый желтый смайлик", "подмигивающий смайлик"],
    "sad": ["грустный смайлик", "грусть", "плачущий смайлик", "очень грустный желтый смайлик"],
    "heart": ["красное сердце", "зеленое сердце", "синее сердце", "разбитое розовое сердце"],
    "cat": ["кот", "рыжий кот", "серый кот", "женщина-кошка"],
    "star": ["звезда", "желтая звезда", "оранжевая звезда", "звезда с глазами"],
    "apple": ["яблоко", "красное яблоко", "зеленое яблоко", "яблоко"],
    "sun": ["солнце", "солнце", "яркое солнце", "летнее солнце на небе"],
    "cloud": ["облако", "белое облако", "облако", "грозовое облако с молнией"],
    "drop": ["капля", "капля воды", "синяя капля", "капля"],
    "fire": ["огонь", "пламя", "костер", "горячий огонь"],
    "ball": ["мяч", "футбольный мяч", "красный мяч", "синий мяч"],
    "flower": ["цветок", "ромашка", "красный цветок", "розовый цветок"],
    "house": ["дом", "домик", "красный дом", "маленький дом с красной крышей"],
    "tree": ["дерево", "елка", "зеленое дерево", "дерево"],
    "moon": ["луна", "месяц", "желтая луна", "луна ночью"],
    "ghost": ["привидение", "призрак", "белое привидение", "милое маленькое белое привидение"],
}


def make_emoji():
    out = ROOT / "emoji"
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2022)
    lines = []
    for kind, captions in CAPTIONS.items():
        for variant, caption in enumerate(captions):
            name = f"{kind}_{variant}.png"
            draw(kind, variant, rng).save(out / "images" / name)
            # every eighth drawing is held out for validation
            split = "val" if (len(lines) % 8) == 7 else "train"
            lines.append(json.dumps({"image_path": f"images/{name}", "caption": caption, "split": split},
                                    ensure_ascii=False))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def golden_mask(rgb, tol=16):
    """Transparent = near-white components touching the border (scipy labelling)."""
    white = np.all(rgb >= 255 - tol, axis=2)
    labels, _ = ndimage.label(white, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    border = set(np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))) - {0}
    transparent = np.isin(labels, list(border))
    return np.where(transparent, 0, 255).astype(np.uint8)


def make_segmentation():
    out = ROOT / "segmentation"
    out.mkdir(parents=True, exist_ok=True)
    red, blue = (220, 30, 30), (40, 70, 220)
    c = 31.5
    r = np.sqrt((X - 0.5 - c) ** 2 + (Y - 0.5 - c) ** 2)
    shapes = {}

    img = np.full((SIDE, SIDE, 3), 255, dtype=np.uint8)
    img[r <= 20] = red
    shapes["disk"] = img

    img = np.full((SIDE, SIDE, 3), 255, dtype=np.uint8)
    img[(r <= 22) & (r >= 10)] = red
    shapes["ring"] = img

    # A "C" opening to the top edge (its white inside is border-connected),
    # a filled bar touching the left edge, and a closed frame with a white hole.
    img = np.full((SIDE, SIDE, 3), 255, dtype=np.uint8)
    img[0:30, 20:44] = blue
    img[0:22, 26:38] = 255
    img[34:46, 0:24] = red
    img[36:60, 34:60] = blue
    img[42:54, 40:54] = 250
    shapes["border"] = img

    for name, img in shapes.items():
        Image.fromarray(img, "RGB").save(out / f"{name}.png")
        Image.fromarray(golden_mask(img), "L").save(out / f"{name}_mask.png")

    disk_img = shapes["disk"]
    alpha = golden_mask(disk_img)
    Image.fromarray(np.dstack([disk_img, np.where(alpha >= 128, 255, 0).astype(np.uint8)]), "RGBA") \
        .save(out / "disk_rgba.png")


if __name__ == "__main__":
    make_emoji()
    make_segmentation()
