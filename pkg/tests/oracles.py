"""Independent reference models shared by several test modules."""
import numpy as np

ITEM = 4
MIB = 1 << 20


def layer_io_shapes(model, image_shape):
    """(input shape, weight shape, output shape) per conv, in graph order."""
    shapes = {"image": tuple(image_shape)}
    out = []
    for node in model.graph:
        op, name = node[0], node[1]
        if op == "conv":
            layer = model.layer(node[2])
            c, h, w = shapes[node[3]]
            kh, kw = layer.kernel
            ho = (h + 2 * layer.padding - kh) // layer.stride + 1
            wo = (w + 2 * layer.padding - kw) // layer.stride + 1
            shapes[name] = (layer.c_out, ho, wo)
            out.append((layer, shapes[node[3]], layer.weight.shape, shapes[name]))
        else:
            shapes[name] = shapes[node[2]]
    return out


def schedule(model, image_shape, mode):
    """Walk the sweep schedule: yields (label, bytes_read, bytes_written, events).

    ``events`` lists arena actions ("alloc", key, nbytes) / ("free", key)
    issued around the sweep, in order.
    """
    plan = []
    for layer, xs, ws, _ in layer_io_shapes(model, image_shape):
        n_a, n_w = int(np.prod(xs)), int(np.prod(ws))
        c = ws[0]
        tag = layer.name
        plan.append(("scales", ITEM * (c + 1), ITEM * (c + 1), [("alloc", f"{tag}.s", ITEM * (c + 1))]))
        for kind, n, sb in (("act", n_a, ITEM), ("weight", n_w, ITEM * c)):
            if mode == "fused":
                plan.append((f"{kind}.fq", ITEM * n + sb, ITEM * n, [("alloc", f"{tag}.{kind}.out", ITEM * n)]))
                continue
            steps = ["div", "clip", "round", "mul"]
            for i, step in enumerate(steps):
                extra = sb if step in ("div", "mul") else 0
                ev = [("alloc", f"{tag}.{kind}.{i}", ITEM * n)]
                if i > 0:
                    ev.append(("free", f"{tag}.{kind}.{i - 1}"))
                plan.append((f"{kind}.{step}", ITEM * n + extra, ITEM * n, ev))
        # the conv is a pass with no modeled traffic
        plan.append(("conv", 0, 0, [("release_layer", tag)]))
    return plan


class PoolOracle:
    """Best-fit pool: smallest free block that fits, lowest id on ties."""

    def __init__(self, block=MIB):
        self.block = block
        self.free = []          # (capacity, id)
        self.live = {}          # key -> (capacity, id, nbytes)
        self.order = []         # live keys in allocation order
        self.next_id = 0
        self.live_bytes = self.reserved = self.peak_live = self.peak_reserved = 0

    def alloc(self, key, nbytes):
        need = max(1, -(-nbytes // self.block)) * self.block
        fits = sorted(b for b in self.free if b[0] >= need)
        if fits:
            cap, bid = fits[0]
            self.free.remove((cap, bid))
        else:
            cap, bid = need, self.next_id
            self.next_id += 1
            self.reserved += need
        self.live[key] = (cap, bid, nbytes)
        self.order.append(key)
        self.live_bytes += nbytes
        self.peak_live = max(self.peak_live, self.live_bytes)
        self.peak_reserved = max(self.peak_reserved, self.reserved)

    def release(self, key):
        cap, bid, nbytes = self.live.pop(key)
        self.order.remove(key)
        self.free.append((cap, bid))
        self.live_bytes -= nbytes

    def release_prefix(self, prefix):
        for key in reversed([k for k in self.order if k.startswith(prefix + ".")]):
            self.release(key)


def simulate(model, image_shape, mode, frames=1, block=MIB):
    """Totals (passes, bytes_read, bytes_written, peak_live, peak_reserved)."""
    pool = PoolOracle(block)
    passes = br = bw = 0
    for _ in range(frames):
        for label, r, w, events in schedule(model, image_shape, mode):
            for ev in events:
                if ev[0] == "alloc":
                    pool.alloc(ev[1], ev[2])
                elif ev[0] == "free":
                    pool.release(ev[1])
                else:
                    pool.release_prefix(ev[1])
            passes += 1
            br += r
            bw += w
    assert pool.live_bytes == 0
    return passes, br, bw, pool.peak_live, pool.peak_reserved


def horn_similarity(src, dst):
    """(s, R, t) minimizing |dst - (s R src + t)|^2 via Horn's quaternion eigenproblem."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    xs, xd = src - src.mean(0), dst - dst.mean(0)
    S = xs.T @ xd
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    w, x, y, z = vecs[:, np.argmax(vals)]
    R = np.array([
        [w*w + x*x - y*y - z*z, 2*(x*y - w*z), 2*(x*z + w*y)],
        [2*(x*y + w*z), w*w - x*x + y*y - z*z, 2*(y*z - w*x)],
        [2*(x*z - w*y), 2*(y*z + w*x), w*w - x*x - y*y + z*z],
    ])
    s = float(np.sum(xd * (xs @ R.T)) / np.sum(xs * xs))
    return s, R, dst.mean(0) - s * R @ src.mean(0)


def fq_scalar(x: float, s: float, q: int) -> float:
    """Element-at-a-time reference in float32 arithmetic."""
    x32, s32 = np.float32(x), np.float32(s)
    z = np.float32(x32 / s32)
    z = min(max(z, np.float32(-q)), np.float32(q))
    return float(np.float32(np.float32(round(float(z), 0)) * s32))


def lsq_scale_grad(x, s, q):
    z = x / s
    return np.where(np.abs(z) <= q, np.rint(z) - z, np.sign(z) * q)


def _rotvec_matrix(w):
    th = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if th < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def search_alignment(src, dst, with_scale=True, iters=60):
    """Iterative (s, R, t) fit: damped Gauss-Newton with a numeric Jacobian, restarted
    from a grid of initial rotations; returns the best (s, R, t) found."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)

    def unpack(p):
        return (np.exp(p[6]) if with_scale else 1.0), _rotvec_matrix(p[:3]), p[3:6]

    def resid(p):
        s, R, t = unpack(p)
        return (dst - (s * src @ R.T + t)).ravel()

    starts = [np.zeros(3)] + [a * np.pi / 2 * e for a in (1, 2, -1) for e in np.eye(3)]
    best, best_cost = None, np.inf
    h = 1e-7
    n_par = 7 if with_scale else 6
    for w0 in starts:
        p = np.concatenate([w0, dst.mean(0) - src.mean(0), [0.0]])
        lam = 1e-3
        r = resid(p)
        for _ in range(iters):
            J = np.empty((r.size, n_par))
            for k in range(n_par):
                e = np.zeros(7)
                e[k] = h
                J[:, k] = (resid(p + e) - resid(p - e)) / (2 * h)
            step = -np.linalg.solve(J.T @ J + lam * np.eye(n_par), J.T @ r)
            cand = p.copy()
            cand[:n_par] += step
            with np.errstate(over="ignore", invalid="ignore"):
                rc = resid(cand)
                ok = np.all(np.isfinite(rc)) and rc @ rc <= r @ r
            if ok:
                p, r, lam = cand, rc, lam / 10
            else:
                lam *= 10
            if np.linalg.norm(step) < 1e-14:
                break
        if r @ r < best_cost:
            best, best_cost = p, r @ r
    return unpack(best)
