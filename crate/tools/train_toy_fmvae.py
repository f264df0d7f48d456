#!/usr/bin/env python3
"""Train a small class-conditional VAE with an auxiliary classifier on an
exported toy corpus and write it as an FMVAE01 bundle.

    fastsep corpus --out corpus/ --seed 1
    python3 tools/train_toy_fmvae.py corpus/ toy.fmvae --parity toy_parity.json

The STFT here mirrors the Rust one: periodic Hamming window, the signal
delayed by (window - shift) zeros, ceil(len / shift) frames.
"""

import argparse
import json
import struct
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.io import wavfile
from scipy.signal import fftconvolve

WINDOW = 4096
SHIFT = 2048
LOG_FLOOR = 1e-8
LOGVAR_CLAMP = 80.0


def stft(x, win=WINDOW, hop=SHIFT):
    pad = win - hop
    frames = max(1, -(-len(x) // hop))
    buf = np.zeros(pad + frames * hop + win)
    buf[pad:pad + len(x)] = x
    window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(win) / win)
    idx = np.arange(frames)[:, None] * hop + np.arange(win)[None, :]
    return np.fft.rfft(buf[idx] * window, axis=1).T


def normalized_log_power(power):
    """Unit-mean scaling then log, as the runtime's log_power input."""
    p = power / max(power.mean(), 1e-300)
    return np.log(np.maximum(p, LOG_FLOOR))


def decaying_noise_rir(rng, fs, rt60):
    n = int(1.2 * rt60 * fs)
    t = np.arange(n) / fs
    h = rng.standard_normal(n) * np.exp(-3 * np.log(10) * t / rt60)
    h[0] = 1.0 / (0.2 + rng.uniform())
    return h / np.sqrt((h ** 2).sum())


def augmented_examples(utts, labels, fs, copies, rng):
    """Clean, reverberant and leaky versions of every utterance: separation
    hands the models partly separated reverberant signals. Returns network
    inputs and reconstruction targets; a target is its input without the
    leakage, scaled like the input, so the decoder learns to model only the
    labelled class."""
    out_x, out_t, out_y = [], [], []
    for x, c in zip(utts, labels):
        for copy in range(copies):
            y = x.copy()
            leak = np.zeros_like(y)
            if copy > 0:
                y = fftconvolve(y, decaying_noise_rir(rng, fs, rng.uniform(0.05, 0.4)))[: len(x)]
                if rng.uniform() < 0.8:
                    others = [i for i in range(len(utts)) if labels[i] != c]
                    o = utts[rng.choice(others)]
                    gain = 10 ** (rng.uniform(-25, -3) / 20) * np.sqrt((y ** 2).mean() / max((o ** 2).mean(), 1e-20))
                    leak = gain * o
            power = np.abs(stft(y + leak)) ** 2
            target = np.abs(stft(y)) ** 2
            scale = 1.0 / max(power.mean(), 1e-300)
            out_x.append(np.log(np.maximum(power * scale, LOG_FLOOR)).astype(np.float32))
            out_t.append(np.log(np.maximum(target * scale, LOG_FLOOR)).astype(np.float32))
            out_y.append(c)
    return np.stack(out_x), np.stack(out_t), np.array(out_y)


class CondConv(nn.Module):
    """Conv or transposed conv that appends the class vector as channels."""

    def __init__(self, cin, cout, kernel, cond, transpose=False):
        super().__init__()
        pad = kernel // 2
        conv = nn.ConvTranspose1d if transpose else nn.Conv1d
        self.conv = conv(cin + cond, cout, kernel, padding=pad)
        self.cond = cond
        self.transpose = transpose
        self.cin = cin
        self.cout = cout
        self.kernel = kernel
        self.pad = pad

    def forward(self, x, c):
        if self.cond:
            x = torch.cat([x, c[:, :, None].expand(-1, -1, x.shape[2])], dim=1)
        return self.conv(x)

    def spec(self):
        kind = "conv_transpose1d" if self.transpose else "conv1d"
        s = {
            "kind": kind,
            "in_channels": self.cin + self.cond,
            "out_channels": self.cout,
            "kernel": self.kernel,
            "stride": 1,
            "padding": self.pad,
            "cond_channels": self.cond,
        }
        if self.transpose:
            s["output_padding"] = 0
        return s


class Stack(nn.Module):
    """conv-BN-GLU, conv-BN-GLU, conv: the layer order the runtime expects."""

    def __init__(self, widths, kernels, cond, transpose=False):
        super().__init__()
        (f_in, h1, h2, f_out) = widths
        self.c1 = CondConv(f_in, 2 * h1, kernels[0], cond, transpose)
        self.b1 = nn.BatchNorm1d(2 * h1)
        self.c2 = CondConv(h1, 2 * h2, kernels[1], cond, transpose)
        self.b2 = nn.BatchNorm1d(2 * h2)
        self.c3 = CondConv(h2, f_out, kernels[2], cond, transpose)

    def forward(self, x, c):
        x = F.glu(self.b1(self.c1(x, c)), dim=1)
        x = F.glu(self.b2(self.c2(x, c)), dim=1)
        return self.c3(x, c)

    def layers(self):
        return [self.c1, self.b1, "glu", self.c2, self.b2, "glu", self.c3]


class ToyAcvae(nn.Module):
    def __init__(self, bins, classes, latent, h1, h2):
        super().__init__()
        self.classes = classes
        self.latent = latent
        self.encoder = Stack((bins, h1, h2, 2 * latent), (1, 5, 5), classes)
        self.decoder = Stack((latent, h2, h1, bins), (5, 5, 1), classes, transpose=True)
        self.classifier = Stack((bins, h1, h2, classes), (1, 5, 5), 0)

    def encode(self, s, c):
        out = self.encoder(s, c)
        return out[:, : self.latent], out[:, self.latent:]

    def decode(self, z, c):
        return self.decoder(z, c).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def logits(self, s):
        return self.classifier(s, None).mean(dim=2)


def holdout_divergence(model, logp, target, labels, classes):
    """Itakura-Saito divergence per element of the gain-fitted decoder mean
    from the leakage-free target."""
    onehot = F.one_hot(labels, classes).float()
    mu, _ = model.encode(logp, onehot)
    log_sigma2 = model.decode(mu, onehot)
    ratio = torch.exp(target - log_sigma2)
    ratio = ratio / ratio.mean(dim=(1, 2), keepdim=True)
    return (ratio - torch.log(ratio) - 1).mean().item()


def losses(model, logp, target, labels, classes):
    onehot = F.one_hot(labels, classes).float()
    mu, logvar = model.encode(logp, onehot)
    z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
    log_sigma2 = model.decode(z, onehot)
    power = torch.exp(target)
    # Itakura-Saito form of the complex Gaussian likelihood, per element.
    rec = (log_sigma2 + power * torch.exp(-log_sigma2)).mean()
    kl = 0.5 * (mu ** 2 + torch.exp(logvar) - logvar - 1).sum(dim=(1, 2)).mean() / (logp.shape[1] * logp.shape[2])
    gen = log_sigma2 - torch.logsumexp(log_sigma2, dim=(1, 2), keepdim=True) + np.log(log_sigma2.shape[1] * log_sigma2.shape[2])
    mi = F.cross_entropy(model.logits(gen.clamp(min=np.log(LOG_FLOOR))), labels)
    ce = F.cross_entropy(model.logits(logp), labels)
    return rec, kl, mi, ce


def layer_entries(stack, net):
    specs, tensors = [], []
    for i, layer in enumerate(stack.layers()):
        if layer == "glu":
            specs.append({"kind": "glu"})
        elif isinstance(layer, nn.BatchNorm1d):
            specs.append({"kind": "batch_norm", "channels": layer.num_features, "eps": layer.eps})
            for name, t in [
                ("gamma", layer.weight),
                ("beta", layer.bias),
                ("running_mean", layer.running_mean),
                ("running_var", layer.running_var),
            ]:
                tensors.append((f"{net}.{i}.{name}", t))
        else:
            specs.append(layer.spec())
            tensors.append((f"{net}.{i}.weight", layer.conv.weight))
            tensors.append((f"{net}.{i}.bias", layer.conv.bias))
    return specs, tensors


def export_bundle(model, bins, path, metadata):
    manifest = {
        "format": "FMVAE01",
        "version": 1,
        "num_classes": model.classes,
        "latent_channels": model.latent,
        "freq_bins": bins,
        "input": {"transform": "log_power", "floor": LOG_FLOOR},
        "conditioning": "channel_concat_broadcast",
        "tensors": [],
        "metadata": metadata,
    }
    payload = bytearray()
    for net in ["encoder", "decoder", "classifier"]:
        specs, tensors = layer_entries(getattr(model, net), net)
        manifest[net] = specs
        for name, t in tensors:
            arr = t.detach().cpu().numpy().astype("<f4")
            manifest["tensors"].append({"name": name, "shape": list(arr.shape)})
            payload += arr.tobytes()
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(b"FMVAE01\0")
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def parity_cases(model, examples, rng, count=3):
    """Runtime-independent reference outputs for a few inputs."""
    cases = []
    with torch.no_grad():
        for k in range(count):
            frames = 3 + 2 * k
            power = rng.gamma(0.5, 1.0, size=(examples.shape[1], frames)) + 1e-6
            logp = torch.tensor(normalized_log_power(power)[None].astype(np.float32))
            probs = torch.softmax(model.logits(logp).double(), dim=1)[0]
            c = torch.tensor(rng.dirichlet(np.ones(model.classes))[None].astype(np.float32))
            mu, _ = model.encode(logp, c)
            log_sigma2 = model.decode(mu, c)
            cases.append(
                {
                    "power": power.tolist(),
                    "class_vector": c[0].double().tolist(),
                    "posterior": probs.tolist(),
                    "latent_mean": mu[0].double().tolist(),
                    "log_variance": log_sigma2[0].double().tolist(),
                }
            )
    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("corpus", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--parity", type=Path)
    ap.add_argument("--curve", type=Path, help="training-curve CSV")
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--latent", type=int, default=32)
    ap.add_argument("--hidden", type=int, nargs=2, default=[128, 64])
    ap.add_argument("--copies", type=int, default=4, help="augmented versions per utterance")
    ap.add_argument("--lambda-l", type=float, default=1.0)
    ap.add_argument("--lambda-i", type=float, default=1.0)
    ap.add_argument("--holdout", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    index = json.loads((args.corpus / "corpus.json").read_text())
    fs = index["sample_rate"]
    classes = index["classes"]
    utts, labels = [], []
    for e in index["utterances"]:
        rate, x = wavfile.read(args.corpus / e["file"])
        assert rate == fs
        utts.append(x.astype(np.float64))
        labels.append(e["label"])
    labels = np.array(labels)

    order = rng.permutation(len(utts))
    n_hold = int(round(args.holdout * len(utts)))
    hold, train = order[:n_hold], order[n_hold:]
    tx, tt, ty = augmented_examples([utts[i] for i in train], labels[train], fs, args.copies, rng)
    hx, ht, hy = augmented_examples([utts[i] for i in hold], labels[hold], fs, args.copies, rng)
    bins = tx.shape[1]
    print(f"{len(tx)} training / {len(hx)} held-out segments, {bins} bins x {tx.shape[2]} frames")

    model = ToyAcvae(bins, classes, args.latent, *args.hidden)
    opt = torch.optim.Adam(model.parameters(), lr=args.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.epochs)
    tx_t, tt_t, ty_t = torch.tensor(tx), torch.tensor(tt), torch.tensor(ty)
    hx_t, ht_t, hy_t = torch.tensor(hx), torch.tensor(ht), torch.tensor(hy)
    curve = ["epoch,loss,reconstruction,kl,mi_ce,classifier_ce,holdout_accuracy,holdout_is"]
    started = time.time()
    for epoch in range(1, args.epochs + 1):
        model.train()
        perm = torch.randperm(len(tx_t))
        totals = np.zeros(5)
        for b in range(0, len(perm), args.batch):
            idx = perm[b: b + args.batch]
            if len(idx) < 2:
                continue
            rec, kl, mi, ce = losses(model, tx_t[idx], tt_t[idx], ty_t[idx], classes)
            loss = rec + kl + args.lambda_l * mi + args.lambda_i * ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += np.array([loss.item(), rec.item(), kl.item(), mi.item(), ce.item()]) * len(idx)
        totals /= len(perm)
        model.eval()
        with torch.no_grad():
            acc = (model.logits(hx_t).argmax(1) == hy_t).float().mean().item()
            div = holdout_divergence(model, hx_t, ht_t, hy_t, classes)
        sched.step()
        curve.append(f"{epoch}," + ",".join(f"{v:.6f}" for v in totals) + f",{acc:.4f},{div:.4f}")
        print(f"epoch {epoch:3d} loss {totals[0]:.4f} rec {totals[1]:.4f} kl {totals[2]:.4f} "
              f"mi {totals[3]:.4f} ce {totals[4]:.4f} holdout acc {acc:.3f} IS {div:.3f} ({time.time() - started:.0f}s)", flush=True)

    model.eval()
    metadata = {
        "trainer": "tools/train_toy_fmvae.py",
        "corpus_classes": classes,
        "sample_rate": fs,
        "stft": {"window_length": WINDOW, "frame_shift": SHIFT},
        "epochs": args.epochs,
        "lambda_l": args.lambda_l,
        "lambda_i": args.lambda_i,
        "hidden": args.hidden,
        "seed": args.seed,
        "holdout_accuracy": acc,
        "holdout_is_divergence": div,
        "latent": args.latent,
        "loss_scaling": "ELBO divided by bins x frames",
    }
    export_bundle(model, bins, args.out, metadata)
    if args.parity:
        args.parity.write_text(json.dumps(parity_cases(model, tx, rng)))
    if args.curve:
        args.curve.write_text("\n".join(curve) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
