"""Published verification counts and percentages (two cities, three view modes)."""

# (dataset, mode, TP, FN, FP, TN, C_P, C_N)
ROWS = [
    ("Zurich", "nadir", 51, 3, 46, 717, 94.4, 94.0),
    ("Zurich", "oblique", 28, 26, 32, 702, 51.9, 92.0),
    ("Zurich", "3d", 54, 0, 72, 691, 100.0, 90.6),
    ("Shenzhen", "nadir", 62, 52, 98, 2294, 54.4, 95.9),
    ("Shenzhen", "oblique", 64, 50, 69, 2323, 56.1, 97.0),
    ("Shenzhen", "3d", 114, 0, 161, 2231, 100.0, 93.2),
]
