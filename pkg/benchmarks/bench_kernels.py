"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
The numpy fallback is what MVBODY_NO_NUMBA=1 selects at import time; this
script imports both implementations directly so one process can compare them.
"""

import time

import numpy as np

from mvbody.kernels import conv_numpy, raster_numpy

try:
    from mvbody.kernels import conv_numba, raster_numba

    HAVE_NUMBA = True
except Exception:
    HAVE_NUMBA = False


def timeit(fn, *args, min_time=0.5):
    fn(*args)  # warm up (JIT compile on the numba side)
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < min_time:
        fn(*args)
        n += 1
    return (time.perf_counter() - t0) / n


def bench_conv():
    print("== 3x3 convolution (training-shaped batches) ==")
    shapes = [
        ("stage1 96x3x32x32->32", (96, 3, 32, 32), 32),
        ("stage2 96x32x16x16->64", (96, 32, 16, 16), 64),
        ("stage3 96x64x8x8->128", (96, 64, 8, 8), 128),
        ("stage4 96x128x4x4->256", (96, 128, 4, 4), 256),
    ]
    rng = np.random.default_rng(0)
    for name, xshape, o in shapes:
        x = rng.random(xshape, dtype=np.float32)
        w = (rng.random((o, xshape[1], 3, 3), dtype=np.float32) - 0.5) * 0.1
        b = np.zeros(o, dtype=np.float32)
        g = rng.random((xshape[0], o, xshape[2], xshape[3]), dtype=np.float32)
        flops = 2 * xshape[0] * o * xshape[2] * xshape[3] * xshape[1] * 9
        rows = [("numpy fwd", lambda: conv_numpy.conv2d_fwd(x, w, b)),
                ("numpy bwd_w", lambda: conv_numpy.conv2d_bwd_weights(g, x))]
        if HAVE_NUMBA:
            rows += [("numba fwd", lambda: conv_numba.conv2d_fwd(x, w, b)),
                     ("numba bwd_w", lambda: conv_numba.conv2d_bwd_weights(g, x))]
        print(f"  {name}:")
        for label, fn in rows:
            dt = timeit(fn)
            print(f"    {label:12s} {dt * 1e3:8.2f} ms  ({flops / dt / 1e9:6.1f} GFLOP/s)")


def bench_raster():
    print("== triangle rasterizer (synthetic body, 12 views) ==")
    from mvbody.meshproj import ViewConfig, normalize_mesh, render_views
    from mvbody.synth import BodyParams, generate_body

    mesh = normalize_mesh(generate_body(BodyParams()))
    print(f"  mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles")
    import mvbody.kernels as K

    for size in (32, 224):
        cfg = ViewConfig(image_size=size, channels=1)
        for label, mod in (("numpy", raster_numpy), ("numba", raster_numba if HAVE_NUMBA else None)):
            if mod is None:
                continue
            K.rasterize = mod.rasterize  # swap the dispatch target
            dt = timeit(lambda: render_views(mesh, cfg))
            print(f"    {size:4d}px {label:6s} {dt * 1e3:8.1f} ms / 12 views")


if __name__ == "__main__":
    print(f"numba available: {HAVE_NUMBA}")
    bench_conv()
    bench_raster()
