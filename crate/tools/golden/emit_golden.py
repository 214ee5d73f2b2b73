#!/usr/bin/env python3
"""Reference implementation of the codec's numeric stages in float64 numpy.

Writes a small random weight bundle (VQVCW1) and one JSON fixture per stage
into the output directory. The Rust crate must reproduce every tensor within
1e-4 and every index exactly.

    python3 tools/golden/emit_golden.py crates/core/tests/fixtures/golden
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

SEED = 20240611

CFG = {
    "n_c": 16,
    "widths": (8, 8, 16),
    "resblocks": 1,
    "window": 4,
    "padding": 2,
    "heads": 2,
    "head_dim": 8,
    "repeats": 2,
    "key": (16, 8, 4),
    "pred": (8, 8, 4),
}

# smallest gap between best and second-best squared distance we accept, so
# float32 vs float64 rounding cannot flip an index
MIN_MARGIN = 1e-3


# ---------------------------------------------------------------- container


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def write_bundle(path: Path, manifest: dict, tensors: dict) -> bytes:
    out = bytearray(b"VQVCW1")
    out += struct.pack("<I", 1)
    text = "".join(f"{k}={manifest[k]}\n" for k in sorted(manifest, key=lambda s: s.encode()))
    out += struct.pack("<I", len(text.encode()))
    out += text.encode()
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors, key=lambda s: s.encode()):
        t = np.asarray(tensors[name], dtype="<f4")
        out += struct.pack("<H", len(name.encode()))
        out += name.encode()
        out += struct.pack("<B", t.ndim)
        for d in t.shape:
            out += struct.pack("<I", d)
        out += t.tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    path.write_bytes(bytes(out))
    return bytes(out)


def read_bundle(data: bytes):
    assert data[:6] == b"VQVCW1"
    assert struct.unpack("<Q", data[-8:])[0] == fnv1a64(data[:-8])
    pos = 10
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = dict(line.split("=", 1) for line in data[pos:pos + mlen].decode().splitlines())
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        rank = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
    assert pos == len(data) - 8
    return manifest, tensors


# ---------------------------------------------------------------- weights


def make_weights(rng):
    c = CFG
    n_c = c["n_c"]
    w1, w2, w3 = c["widths"]
    t = {}

    def conv(name, cin, cout, k, gain=1.0):
        std = gain / np.sqrt(cin * k * k)
        t[name + ".w"] = rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32)
        t[name + ".b"] = rng.normal(0.0, 0.05, (cout,)).astype(np.float32)

    def lin(name, din, dout, gain=1.0):
        t[name + ".w"] = rng.normal(0.0, gain / np.sqrt(din), (dout, din)).astype(np.float32)
        t[name + ".b"] = rng.normal(0.0, 0.05, (dout,)).astype(np.float32)

    def res(prefix, ch):
        conv(prefix + ".conv0", ch, ch, 3)
        conv(prefix + ".conv1", ch, ch, 3, 0.5)

    ins, outs = (3, w1, w2), (w1, w2, w3)
    for i in range(3):
        conv(f"enc.down{i}", ins[i], outs[i], 2)
        for j in range(c["resblocks"]):
            res(f"enc.stage{i}.res{j}", outs[i])
    conv("enc.out", w3, n_c, 3)

    conv("dec.in", n_c, w3, 3)
    stage_w, up_out = (w3, w2, w1), (w2, w1, 3)
    for i in range(3):
        for j in range(c["resblocks"]):
            res(f"dec.stage{i}.res{j}", stage_w[i])
        conv(f"dec.up{i}", stage_w[i], up_out[i], 3)

    inner = c["heads"] * c["head_dim"]
    for p in ("ctx_enc", "ctx_dec"):
        for r in range(c["repeats"]):
            lin(f"{p}.block{r}.wca.q", n_c, inner)
            lin(f"{p}.block{r}.wca.k", n_c, inner)
            lin(f"{p}.block{r}.wca.v", n_c, inner)
            lin(f"{p}.block{r}.wca.o", inner, n_c)
            res(f"{p}.block{r}.res", n_c)

    for prefix, sizes in (("key", c["key"]), ("pred.{}x{}x{}".format(*c["pred"]), c["pred"])):
        for s, k in enumerate(sizes, start=1):
            conv(f"{prefix}.q.stage{s}.down", n_c, n_c, 2, 0.8)
            conv(f"{prefix}.q.stage{s}.up", n_c, n_c, 3, 0.8)
            for h in range(2):
                t[f"{prefix}.cb.stage{s}.half{h}"] = rng.normal(0.0, 0.5, (k, n_c // 2)).astype(np.float32)
    return t


def manifest():
    c = CFG
    return {
        "ae.latent_channels": c["n_c"],
        "ae.widths": ",".join(map(str, c["widths"])),
        "ae.resblocks": c["resblocks"],
        "ae.light_decoder": 0,
        "ctx.window": c["window"],
        "ctx.padding": c["padding"],
        "ctx.heads": c["heads"],
        "ctx.head_dim": c["head_dim"],
        "ctx.repeats": c["repeats"],
        "vq.key": ",".join(map(str, c["key"])),
        "vq.pred": ",".join(map(str, c["pred"])),
    }


# ---------------------------------------------------------------- reference ops


def conv2d(x, w, b, stride, pad):
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, oh, ow))
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
            out += np.einsum("oi,ihw->ohw", w[:, :, ky, kx].astype(np.float64), patch)
    return out + b.astype(np.float64)[:, None, None]


def act(x):
    return np.where(x >= 0, x, 0.01 * x)


class Ref:
    def __init__(self, t):
        self.t = t

    def conv(self, name, x, stride=1, pad=1):
        return conv2d(x, self.t[name + ".w"], self.t[name + ".b"], stride, pad)

    def down(self, name, x):
        return self.conv(name, x, stride=2, pad=0)

    def up(self, name, x):
        return self.conv(name, x.repeat(2, axis=1).repeat(2, axis=2))

    def res(self, prefix, x):
        return x + self.conv(prefix + ".conv1", act(self.conv(prefix + ".conv0", act(x))))

    def lin(self, name, x):
        return x @ self.t[name + ".w"].astype(np.float64).T + self.t[name + ".b"]

    def encode_image(self, x):
        for i in range(3):
            x = self.down(f"enc.down{i}", x)
            for j in range(CFG["resblocks"]):
                x = self.res(f"enc.stage{i}.res{j}", x)
        return self.conv("enc.out", x)

    def decode_image(self, y):
        x = self.conv("dec.in", y)
        for i in range(3):
            for j in range(CFG["resblocks"]):
                x = self.res(f"dec.stage{i}.res{j}", x)
            x = self.up(f"dec.up{i}", x)
        return np.clip(x, 0.0, 1.0)

    def wca(self, prefix, y, ref):
        s, p = CFG["window"], CFG["padding"]
        heads, hd = CFG["heads"], CFG["head_dim"]
        c, h, w = y.shape
        refp = np.zeros((c, h + 2 * p, w + 2 * p))
        refp[:, p:p + h, p:p + w] = ref
        out = y.copy()
        for wy in range(h // s):
            for wx in range(w // s):
                qt = y[:, wy * s:(wy + 1) * s, wx * s:(wx + 1) * s].reshape(c, -1).T
                kt = refp[:, wy * s:wy * s + s + 2 * p, wx * s:wx * s + s + 2 * p].reshape(c, -1).T
                q = self.lin(prefix + ".q", qt)
                k = self.lin(prefix + ".k", kt)
                v = self.lin(prefix + ".v", kt)
                parts = []
                for hh in range(heads):
                    sl = slice(hh * hd, (hh + 1) * hd)
                    scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
                    scores -= scores.max(axis=1, keepdims=True)
                    e = np.exp(scores)
                    parts.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
                o = self.lin(prefix + ".o", np.concatenate(parts, axis=1))
                out[:, wy * s:(wy + 1) * s, wx * s:(wx + 1) * s] += o.T.reshape(c, s, s)
        return out

    def context(self, prefix, y, ref):
        for r in range(CFG["repeats"]):
            y = self.wca(f"{prefix}.block{r}.wca", y, ref)
            y = self.res(f"{prefix}.block{r}.res", y)
        return y

    def quantize(self, prefix, y):
        residual = y
        grids, zhats, margins = [], [], []
        for s in range(1, 4):
            z = self.down(f"{prefix}.q.stage{s}.down", residual)
            c, h, w = z.shape
            half = c // 2
            zhat = np.zeros_like(z)
            planes = []
            for i in range(2):
                book = self.t[f"{prefix}.cb.stage{s}.half{i}"].astype(np.float64)
                vecs = z[i * half:(i + 1) * half].reshape(half, -1).T
                d = ((vecs[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
                idx = d.argmin(axis=1)  # first minimum, i.e. lowest index on ties
                srt = np.sort(d, axis=1)
                margins.append((srt[:, 1] - srt[:, 0]).min() if book.shape[0] > 1 else np.inf)
                planes.append(idx.tolist())
                zhat[i * half:(i + 1) * half] = book[idx].T.reshape(half, h, w)
            grids.append({"height": h, "width": w, "planes": planes})
            zhats.append(zhat)
            residual = z - zhat
        acc = zhats[2]
        for s in (3, 2):
            acc = self.up(f"{prefix}.q.stage{s}.up", acc) + zhats[s - 2]
        return grids, self.up(f"{prefix}.q.stage1.up", acc), min(margins)


# ---------------------------------------------------------------- MS-SSIM


def reference_ms_ssim(a, b):
    """Direct 2-D Gaussian windows via sliding views; channel mean."""
    g1 = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (11, 11))
        return np.einsum("ijkl,kl->ij", v, win)

    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch].astype(np.float64), b[ch].astype(np.float64)
        vals = []
        for level in range(5):
            mx, my = filt(x), filt(y)
            sxx = filt(x * x) - mx * mx
            syy = filt(y * y) - my * my
            sxy = filt(x * y) - mx * my
            cs = (2 * sxy + c2) / (sxx + syy + c2)
            lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
            vals.append(max((lum * cs).mean() if level == 4 else cs.mean(), 0.0))
            if level < 4:
                hh, ww = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
                x = x[:hh, :ww].reshape(hh // 2, 2, ww // 2, 2).mean(axis=(1, 3))
                y = y[:hh, :ww].reshape(hh // 2, 2, ww // 2, 2).mean(axis=(1, 3))
        scores.append(np.prod(np.array(vals) ** weights))
    return float(np.mean(scores))


def hash_u32(i, k):
    return (i * 2654435761 + k * 40503) & 0xFFFFFFFF


def pattern_image(kind, c, h, w):
    """Integer-defined test images; the Rust tests rebuild them exactly."""
    ch, y, x = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    i = (ch * h + y) * w + x
    base = (x * 3 + y * 2 + ch * 50 + hash_u32(i, 1) % 64) % 256
    if kind == "a":
        v = base
    elif kind == "b":
        v = (base * 3 // 4 + hash_u32(i, 2) % 48) % 256
    else:
        v = 255 - base
    return (v.astype(np.float32) / np.float32(255.0)).astype(np.float32)


# ---------------------------------------------------------------- fixtures


def enc_tensor(x):
    x = np.asarray(x, dtype=np.float64)
    return {"shape": list(x.shape), "data": [float("%.9g" % v) for v in x.reshape(-1)]}


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, separators=(",", ":")) + "\n")


def main(out_dir: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)
    tensors = make_weights(rng)
    raw = write_bundle(out / "weights.vqvcw", manifest(), tensors)
    _, back = read_bundle(raw)
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    ref = Ref(tensors)

    n_c = CFG["n_c"]
    image = rng.uniform(0.0, 1.0, (3, 64, 64)).astype(np.float32)
    latent = ref.encode_image(image.astype(np.float64))
    write_json(out / "encode_image.json", {"input": enc_tensor(image), "output": enc_tensor(latent)})

    y_in = rng.normal(0.0, 1.0, (n_c, 8, 8)).astype(np.float32)
    write_json(out / "decode_image.json",
               {"input": enc_tensor(y_in), "output": enc_tensor(ref.decode_image(y_in.astype(np.float64)))})

    y_cur = rng.normal(0.0, 1.0, (n_c, 8, 8)).astype(np.float32)
    y_ref = rng.normal(0.0, 1.0, (n_c, 8, 8)).astype(np.float32)
    yc, yr = y_cur.astype(np.float64), y_ref.astype(np.float64)
    pair = {"current": enc_tensor(y_cur), "reference": enc_tensor(y_ref)}
    write_json(out / "wca_layer.json", {**pair, "weights": "ctx_enc.block0.wca",
                                        "output": enc_tensor(ref.wca("ctx_enc.block0.wca", yc, yr))})
    write_json(out / "context_encode.json", {**pair, "output": enc_tensor(ref.context("ctx_enc", yc, yr))})
    write_json(out / "context_decode.json", {**pair, "output": enc_tensor(ref.context("ctx_dec", yc, yr))})

    # draw inputs until every nearest codeword wins by a clear margin
    for attempt in range(1000):
        yq = rng.normal(0.0, 1.0, (n_c, 8, 8)).astype(np.float32)
        grids, yhat, margin = ref.quantize("key", yq.astype(np.float64))
        if margin >= MIN_MARGIN:
            break
    else:
        raise SystemExit("no input with a safe argmin margin")
    write_json(out / "multistage_quantize.json", {
        "prefix": "key",
        "input": enc_tensor(yq),
        "grids": grids,
        "output": enc_tensor(yhat),
        "min_margin": float("%.9g" % margin),
    })

    a = pattern_image("a", 3, 192, 200)
    pairs = {"a_b": (a, pattern_image("b", 3, 192, 200)), "a_inverted": (a, pattern_image("inv", 3, 192, 200)),
             "a_a": (a, a)}
    write_json(out / "ms_ssim.json", {
        "extent": [3, 192, 200],
        "scores": {k: reference_ms_ssim(x, y) for k, (x, y) in pairs.items()},
    })

    # the fixtures must parse back
    for f in sorted(out.glob("*.json")):
        json.loads(f.read_text())


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/golden")
