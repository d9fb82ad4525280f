"""Emit the shipped architecture spec files (schema 1) used by the audit.

Layouts follow the torchvision reference implementations of each network.
Run from the repository root:  python3 scripts/gen_arch_specs.py
"""
import json
import os

OUT = os.path.join("crates", "core", "specs")


def conv(c_in, c_out, k, stride=1, groups=1, bias=False):
    return {"type": "conv", "c_in": c_in, "c_out": c_out, "kh": k, "kw": k,
            "stride": stride, "groups": groups, "bias": bias}


def bn(c):
    return {"type": "batchnorm", "c": c}


def act(kind="relu"):
    return {"type": "activation", "kind": kind}


def pool(kind, k, stride):
    return {"type": "pool", "kind": kind, "k": k, "stride": stride}


GAP = {"type": "global_avg_pool"}


def fc(n_in, n_out):
    return {"type": "fc", "n_in": n_in, "n_out": n_out, "bias": True}


def resnet_stem():
    return [conv(3, 64, 7, 2), bn(64), act(), pool("max", 3, 2)]


def basic_block(c_in, c_out, stride):
    branch = [conv(c_in, c_out, 3, stride), bn(c_out), act(), conv(c_out, c_out, 3), bn(c_out)]
    shortcut = []
    if stride != 1 or c_in != c_out:
        shortcut = [conv(c_in, c_out, 1, stride), bn(c_out)]
    return [{"type": "residual", "branch": branch, "shortcut": shortcut}, act()]


def bottleneck(c_in, width, stride):
    c_out = width * 4
    branch = [conv(c_in, width, 1), bn(width), act(),
              conv(width, width, 3, stride), bn(width), act(),
              conv(width, c_out, 1), bn(c_out)]
    shortcut = []
    if stride != 1 or c_in != c_out:
        shortcut = [conv(c_in, c_out, 1, stride), bn(c_out)]
    return [{"type": "residual", "branch": branch, "shortcut": shortcut}, act()]


def resnet18():
    layers = resnet_stem()
    c = 64
    for width, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        layers += basic_block(c, width, stride)
        layers += basic_block(width, width, 1)
        c = width
    return layers + [GAP, fc(512, 1000)], 512


def resnet50():
    layers = resnet_stem()
    c = 64
    for width, blocks, stride in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]:
        for i in range(blocks):
            layers += bottleneck(c, width, stride if i == 0 else 1)
            c = width * 4
    return layers + [GAP, fc(2048, 1000)], 2048


def mobilenet_v2():
    layers = [conv(3, 32, 3, 2), bn(32), act("relu6")]
    c = 32
    for t, c_out, n, s in [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                           (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]:
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = c * t
            block = []
            if t != 1:
                block += [conv(c, hidden, 1), bn(hidden), act("relu6")]
            block += [conv(hidden, hidden, 3, stride, groups=hidden), bn(hidden), act("relu6"),
                      conv(hidden, c_out, 1), bn(c_out)]
            if stride == 1 and c == c_out:
                layers.append({"type": "residual", "branch": block, "shortcut": []})
            else:
                layers += block
            c = c_out
    layers += [conv(320, 1280, 1), bn(1280), act("relu6"), GAP, act("dropout"), fc(1280, 1000)]
    return layers, 1280


def shufflenet_v2_x0_5():
    layers = [conv(3, 24, 3, 2), bn(24), act(), pool("max", 3, 2)]
    c = 24
    for c_out, repeats in [(48, 4), (96, 8), (192, 4)]:
        half = c_out // 2
        for i in range(repeats):
            if i == 0:
                branch1 = [conv(c, c, 3, 2, groups=c), bn(c), conv(c, half, 1), bn(half), act()]
                branch2 = [conv(c, half, 1), bn(half), act(),
                           conv(half, half, 3, 2, groups=half), bn(half),
                           conv(half, half, 1), bn(half), act()]
                layers.append({"type": "concat", "split": False, "branches": [branch1, branch2]})
            else:
                branch2 = [conv(half, half, 1), bn(half), act(),
                           conv(half, half, 3, 1, groups=half), bn(half),
                           conv(half, half, 1), bn(half), act()]
                layers.append({"type": "concat", "split": True, "branches": [[], branch2]})
            layers.append({"type": "channel_shuffle", "groups": 2})
            c = c_out
    layers += [conv(192, 1024, 1), bn(1024), act(), GAP, fc(1024, 1000)]
    return layers, 1024


def dump(name, builder):
    layers, feat = builder()
    spec = {"schema": 1, "name": name, "in_channels": 3, "num_classes": 1000,
            "feature_dim": feat}
    path = os.path.join(OUT, name + ".json")
    # one layer object per line keeps the files diffable
    with open(path, "w") as f:
        f.write("{\n")
        for key, value in spec.items():
            f.write(f"  {json.dumps(key)}: {json.dumps(value)},\n")
        f.write('  "layers": [\n')
        f.write(",\n".join("    " + json.dumps(layer) for layer in layers))
        f.write("\n  ]\n}\n")


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    dump("resnet18", resnet18)
    dump("resnet50", resnet50)
    dump("mobilenet_v2", mobilenet_v2)
    dump("shufflenet_v2_x0.5", shufflenet_v2_x0_5)
