"""Smoke test for the farview Python module.

Run with `python3 python/smoke_test.py` or `pytest python/`. If the module is
not importable, it is built with cargo and the shared object is copied next
to this file.
"""

import os
import shutil
import struct
import subprocess
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def _load():
    sys.path.insert(0, HERE)
    try:
        import farview
        return farview
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "farview-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    shutil.copy(os.path.join(ROOT, "target", "release", "libfarview.so"), os.path.join(HERE, "farview.so"))
    import farview
    return farview


fv = _load()


def pack(*cols):
    return struct.pack("<%dQ" % len(cols), *cols)


def test_select_distinct_group_by():
    node = fv.Node(regions=2)
    c = fv.Client(node.address)
    rows = [(i, i % 10, i * 3) for i in range(1000)]
    t = c.alloc_table("t", [8, 8, 8], len(rows))
    c.write(t, b"".join(pack(*r) for r in rows))
    assert c.read(t) == b"".join(pack(*r) for r in rows)

    got = c.select(t, 0b001, 1, "<", 3)
    assert sorted(struct.unpack("<Q", r)[0] for r in got) == [r[0] for r in rows if r[1] < 3]
    assert c.select(t, 0b001, 1, "<", 3, vectorized=True) == got

    keys = sorted(struct.unpack("<Q", r)[0] for r in c.distinct(t, 0b010, 0b010))
    assert keys == list(range(10))

    groups = c.group_by(t, 0b010, [(2, "count"), (2, "sum"), (2, "avg")])
    by_key = {struct.unpack("<Q", k)[0]: v for k, v in groups}
    assert len(by_key) == 10
    for k, (count, total, avg) in by_key.items():
        members = [r[2] for r in rows if r[1] == k]
        assert count == len(members)
        assert total == sum(members)
        assert abs(avg - sum(members) / len(members)) < 1e-9

    c.free(t)
    try:
        c.free(t)
    except fv.FarviewError:
        pass
    else:
        raise AssertionError("second free succeeded")
    c.close()
    node.shutdown()


def test_regex():
    node = fv.Node()
    c = fv.Client(node.address)
    words = [b"farview", b"nothing", b"faaarview here", b"far view"]
    width = 24
    data = b"".join(pack(i) + struct.pack("<H", len(w)) + w.ljust(width - 2, b"\0") for i, w in enumerate(words))
    t = c.alloc_table("s", [8, width], len(words))
    c.write(t, data)
    ids = sorted(struct.unpack("<Q", r)[0] for r in c.regex(t, 0b01, 1, "fa+rview"))
    assert ids == [0, 2], ids
    c.close()
    node.shutdown()


def test_run_bench():
    recs = fv.run_bench("select", rows=4000, selectivity=0.25, runs=2, paths="fv,lcpu")
    assert len(recs) == 4
    assert {r["path"] for r in recs} == {"FV", "LCPU"}
    assert all(r["rows_out"] == 1000 for r in recs)
    try:
        fv.run_bench("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad query accepted")


if __name__ == "__main__":
    for name, f in sorted(globals().items()):
        if name.startswith("test_") and callable(f):
            f()
            print("ok", name)
