"""Smoke test for the specleak Python extension.

Builds the cdylib (unless SPECLEAK_PY_LIB points at a built one), loads it as
the `specleak` module and exercises each exposed type once.

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def built_library():
    env = os.environ.get("SPECLEAK_PY_LIB")
    if env:
        return pathlib.Path(env)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "specleak-py"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    for name in ("libspecleak_py.so", "libspecleak_py.dylib", "specleak_py.dll"):
        path = target / "release" / name
        if path.exists():
            return path
    sys.exit("built library not found under " + str(target / "release"))


def load(lib, workdir):
    suffix = importlib.machinery.EXTENSION_SUFFIXES[0]
    dest = pathlib.Path(workdir) / ("specleak" + suffix)
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("specleak", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as workdir:
        sl = load(built_library(), workdir)
        print("specleak", sl.__version__)

        model = sl.NGramModel.train("a b c a b c a b c\na b d", order=3, alpha=0.01)
        assert model.order == 3 and model.vocab_size == 7, model
        ids = model.tokenize("a b c")
        assert model.detokenize(ids) == "a b c"
        dist = model.next_distribution(ids)
        assert abs(sum(dist) - 1.0) < 1e-9
        saved = pathlib.Path(workdir) / "model.txt"
        model.save(str(saved))
        again = sl.NGramModel.load(str(saved))
        assert again.next_distribution(ids) == dist

        ar = model.decode("a b", engine="autoregressive", max_tokens=12)
        la = model.decode("a b", engine="lookahead", n=4, g=2, max_tokens=12)
        assert sum(ar, []) == sum(la, []), "lookahead must be lossless at temperature 0"
        assert all(len(it) <= 3 for it in la)
        try:
            model.tokenize("zzz")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown word accepted")

        wb = sl.Workbench(overrides=["fingerprint.traces_per_query=2"])
        prompts = wb.benchmark_prompts()
        assert len(prompts) == 50
        plain = wb.session(prompts[0])
        padded = wb.session(prompts[0], pad_to=1024)
        assert plain["transcript"] == padded["transcript"]
        assert set(padded["packet_sizes"]) == {1024}
        sizes, counts = [], []
        for prompt in prompts[:10]:
            log = wb.session(prompt)
            sizes += [float(s) for s in log["packet_sizes"]]
            counts += [float(c) for c in log["token_counts"]]
        print("size/count correlation over 10 prompts:", round(sl.pearson(sizes, counts), 3))

        probe = wb.probe_n()
        assert probe["exact"] == probe["total"], probe["exact"]
        print("probe_n:", probe["exact"], "/", probe["total"], "exact")
    print("ok")


if __name__ == "__main__":
    main()
