"""Writes the tiny IDX fixture pair used by the loader tests.

Four 2x3 images with labels 3, 0, 2, 1, plus a few malformed variants.
"""
import struct

images = [
    [0, 255, 0, 128, 64, 32],
    [10, 20, 30, 40, 50, 60],
    [255, 255, 255, 0, 0, 0],
    [1, 2, 3, 4, 5, 6],
]
labels = [3, 0, 2, 1]

def images_bytes(imgs, n=None):
    n = len(imgs) if n is None else n
    out = struct.pack(">IIII", 0x00000803, n, 2, 3)
    for img in imgs:
        out += bytes(img)
    return out

def labels_bytes(ls):
    return struct.pack(">II", 0x00000801, len(ls)) + bytes(ls)

with open("tiny-images.idx3-ubyte", "wb") as f:
    f.write(images_bytes(images))
with open("tiny-labels.idx1-ubyte", "wb") as f:
    f.write(labels_bytes(labels))
with open("three-labels.idx1-ubyte", "wb") as f:
    f.write(labels_bytes(labels[:3]))
with open("truncated-images.idx3-ubyte", "wb") as f:
    f.write(images_bytes(images)[:-5])
with open("swapped-magic.idx3-ubyte", "wb") as f:
    f.write(labels_bytes(labels))
with open("empty.idx3-ubyte", "wb") as f:
    pass
