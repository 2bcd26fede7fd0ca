#!/usr/bin/env python3
"""Fetch MovieLens 100k and lay it out for the hybrec pipeline.

Writes:
  <out>/u.data                 tab-separated user, item, rating, timestamp
  <out>/fixtures/<item>.json   {"id", "title", "genres", "overview"} per item

The GroupLens archive is tried first. When it is unreachable the copy bundled
in the RecBole wheel on PyPI is used instead (same ratings, same item table).
"""
import argparse
import glob
import io
import json
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    ratings = archive.read("ml-100k/u.data").decode("latin-1")
    items = {}
    for line in archive.read("ml-100k/u.item").decode("latin-1").splitlines():
        cols = line.split("|")
        if len(cols) < 24:
            continue
        genres = [g for g, flag in zip(GENRES, cols[5:24]) if flag == "1" and g != "unknown"]
        items[int(cols[0])] = (cols[1], genres)
    return ratings, items


def from_recbole():
    tmp = tempfile.mkdtemp()
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "recbole==1.2.1"],
        check=True,
    )
    wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "recbole-*.whl"))[0])
    inter = wheel.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode("utf-8")
    ratings = "\n".join(inter.splitlines()[1:]) + "\n"
    items = {}
    for line in wheel.read("recbole/dataset_example/ml-100k/ml-100k.item").decode("utf-8").splitlines()[1:]:
        cols = line.split("\t")
        title = cols[1]
        if len(cols) > 2 and cols[2]:
            title = f"{title} ({cols[2]})"
        genres = cols[3].split() if len(cols) > 3 else []
        items[int(cols[0])] = (title, genres)
    return ratings, items


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "ml-100k"))
    args = parser.parse_args()
    try:
        ratings, items = from_grouplens()
        source = "grouplens"
    except Exception as err:  # noqa: BLE001
        print(f"grouplens unavailable ({err}); falling back to the RecBole wheel", file=sys.stderr)
        ratings, items = from_recbole()
        source = "recbole"
    os.makedirs(os.path.join(args.out, "fixtures"), exist_ok=True)
    with open(os.path.join(args.out, "u.data"), "w") as fh:
        fh.write(ratings)
    for item_id, (title, genres) in items.items():
        doc = {"id": item_id, "title": title, "genres": genres, "overview": ""}
        with open(os.path.join(args.out, "fixtures", f"{item_id}.json"), "w") as fh:
            json.dump(doc, fh)
    print(f"wrote {len(ratings.splitlines())} ratings and {len(items)} items from {source} to {args.out}")


if __name__ == "__main__":
    main()
