"""Independent oracles shared by the test modules.

Everything here is deliberately written from scratch (loops, sets,
struct-packed bytes) so it cannot share a code path with the package.
"""

import struct

import numpy as np
import torch


def dice_bruteforce(a, b) -> float:
    """Set-arithmetic Dice: 2|A∩B| / (|A|+|B|)."""
    sa = {tuple(ix) for ix in np.argwhere(np.asarray(a) == 1)}
    sb = {tuple(ix) for ix in np.argwhere(np.asarray(b) == 1)}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def iou_bruteforce(a, b) -> float:
    sa = {tuple(ix) for ix in np.argwhere(np.asarray(a) == 1)}
    sb = {tuple(ix) for ix in np.argwhere(np.asarray(b) == 1)}
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def write_raw_nifti(path, shape, pixdim, data_f32, dim0=3, magic=b"n+1\x00"):
    """Independent NIfTI-1 writer: struct-packed header + Fortran-order float32."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = [dim0] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)
    pix = [1.0] + list(pixdim) + [1.0] * (7 - len(pixdim))
    struct.pack_into("<8f", hdr, 76, *pix)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = magic
    body = np.asarray(data_f32, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(bytes(hdr) + b"\x00" * 4 + body)


def flood_fill_components_26(mask):
    """BFS flood fill with 26-connectivity; returns list of voxel-index sets."""
    mask = np.asarray(mask)
    seen = np.zeros(mask.shape, dtype=bool)
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ]
    components = []
    for start in map(tuple, np.argwhere(mask == 1)):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = set()
        while queue:
            v = queue.pop()
            comp.add(v)
            for dx, dy, dz in offsets:
                w = (v[0] + dx, v[1] + dy, v[2] + dz)
                if all(0 <= w[i] < mask.shape[i] for i in range(3)):
                    if mask[w] == 1 and not seen[w]:
                        seen[w] = True
                        queue.append(w)
        components.append(comp)
    return components


def finite_difference_grads(params, loss_fn, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. each tensor in params.

    params are torch tensors mutated in place around the evaluation point;
    loss_fn takes no arguments and returns a python float.
    """
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def conv_params(k, cin, cout, bias=True):
    return k * k * cin * cout + (cout if bias else 0)


def block_params(cin, cout, bn=False):
    # two 3x3 convs; BN adds weight+bias per channel per conv
    p = conv_params(3, cin, cout) + conv_params(3, cout, cout)
    if bn:
        p += 4 * cout
    return p


def unet_expected_params(depth=3, base=4, in_ch=3, out_ch=1, bn=False):
    ch = [base * 2**i for i in range(depth)]
    total = block_params(in_ch, ch[0], bn)
    for i in range(1, depth):
        total += block_params(ch[i - 1], ch[i], bn)
    for i in range(depth - 1):
        total += conv_params(2, ch[i + 1], ch[i])  # transposed conv
        total += block_params(ch[i] * 2, ch[i], bn)
    total += conv_params(1, ch[0], out_ch)
    return total


def gate_expected_params(x_ch, g_ch):
    inter = max(x_ch // 2, 1)
    return conv_params(1, x_ch, inter) + conv_params(1, g_ch, inter) + conv_params(1, inter, 1)


def attention_expected_params(depth=3, base=4, in_ch=3, out_ch=1, bn=False):
    ch = [base * 2**i for i in range(depth)]
    total = unet_expected_params(depth, base, in_ch, out_ch, bn)
    for i in range(depth - 1):
        total += gate_expected_params(ch[i], ch[i + 1])
    return total


def nested_expected_params(depth=3, base=4, in_ch=3, out_ch=1, bn=False, deep_supervision=False):
    ch = [base * 2**i for i in range(depth)]
    total = block_params(in_ch, ch[0], bn)
    for i in range(1, depth):
        total += block_params(ch[i - 1], ch[i], bn)
    for i in range(depth - 1):
        for j in range(1, depth - i):
            total += conv_params(2, ch[i + 1], ch[i])
            total += block_params(ch[i] * j + ch[i], ch[i], bn)
    heads = depth - 1 if deep_supervision else 1
    total += heads * conv_params(1, ch[0], out_ch)
    return total


def relative_grad_error(analytic, numeric, min_mag=1e-6):
    """Max relative error over entries where the analytic gradient is non-tiny."""
    errs = []
    for a, n in zip(analytic, numeric):
        a = a.detach().reshape(-1)
        n = n.detach().reshape(-1)
        for i in range(a.numel()):
            if abs(a[i].item()) > min_mag:
                errs.append(abs(a[i].item() - n[i].item()) / abs(a[i].item()))
    assert errs, "no gradient entries above the magnitude floor"
    return max(errs)
