"""Regenerates the reference .npy fixtures with numpy.

Run from this directory: python3 gen_reference.py
"""
import numpy as np

# Value formulas are mirrored in tests/npy_reference.rs.
np.save("f4_4x4x8.npy", (((np.arange(128) * 37) % 101 - 50) / 16).astype("<f4").reshape(4, 4, 8))
np.save("f4_scalar_1.npy", np.array([1.5], dtype="<f4"))
np.save("f4_empty.npy", np.zeros((0,), dtype="<f4"))
np.save("u2_2x2.npy", np.array([[0, 1], [65535, 2]], dtype="<u2"))
np.save("u1_2x3.npy", np.arange(6, dtype="u1").reshape(2, 3))
np.save("u2_3x5.npy", (np.arange(15) % 4).astype("<u2").reshape(3, 5))
np.save("f4_fortran.npy", np.asfortranarray(np.arange(6, dtype="<f4").reshape(2, 3)))
np.save("f8_2.npy", np.array([1.0, 2.0], dtype="<f8"))
