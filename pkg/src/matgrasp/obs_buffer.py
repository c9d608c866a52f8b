"""Rolling 20-step observation window and raw tactile conditioning."""
from collections import deque
import csv

import numpy as np

HISTORY = 20
N_CELLS = 96
N_JOINTS = 8
JOINT_DELTA_THRESHOLD = 0.05

# (name, shape) of each observation component, in encoding order
COMPONENTS = (
    ("contacts_binary", (HISTORY, N_CELLS)),
    ("d_contacts_binary", (HISTORY - 1, N_CELLS)),
    ("joint_angles", (HISTORY, N_JOINTS)),
    ("d_joint_angles", (HISTORY - 1, N_JOINTS)),
    ("contacts_xyz", (HISTORY, N_CELLS, 3)),
    ("d_contacts_xyz", (HISTORY - 1, N_CELLS, 3)),
)
COMPONENT_SIZES = tuple(int(np.prod(s)) for _, s in COMPONENTS)
OBS_DIM = sum(COMPONENT_SIZES)  # 15288


def component_slices(sizes=COMPONENT_SIZES):
    out, start = [], 0
    for n in sizes:
        out.append(slice(start, start + n))
        start += n
    return out


class ObservationWindow:
    """Last 20 frames, oldest first; rows before the first frame are zero.

    Row k of the delta arrays is row k+1 minus row k of the history arrays.
    """

    def __init__(self, n_cells=N_CELLS, n_joints=N_JOINTS, history=HISTORY,
                 threshold=JOINT_DELTA_THRESHOLD):
        self.n_cells, self.n_joints, self.history = n_cells, n_joints, history
        self.threshold = threshold
        self.contacts_binary = np.zeros((history, n_cells))
        self.joint_angles = np.zeros((history, n_joints))
        self.contacts_xyz = np.zeros((history, n_cells, 3))
        self.n_pushed = 0

    def push(self, frame):
        self.contacts_binary = np.roll(self.contacts_binary, -1, axis=0)
        self.joint_angles = np.roll(self.joint_angles, -1, axis=0)
        self.contacts_xyz = np.roll(self.contacts_xyz, -1, axis=0)
        self.contacts_binary[-1] = frame.binary
        self.joint_angles[-1] = frame.joint_angles
        self.contacts_xyz[-1] = frame.positions_ee
        self.n_pushed += 1
        return self

    @property
    def d_contacts_binary(self):
        return np.diff(self.contacts_binary, axis=0)

    @property
    def d_joint_angles(self):
        return (np.abs(np.diff(self.joint_angles, axis=0)) > self.threshold).astype(float)

    @property
    def d_contacts_xyz(self):
        return np.diff(self.contacts_xyz, axis=0)

    def copy(self):
        w = ObservationWindow(self.n_cells, self.n_joints, self.history, self.threshold)
        w.contacts_binary = self.contacts_binary.copy()
        w.joint_angles = self.joint_angles.copy()
        w.contacts_xyz = self.contacts_xyz.copy()
        w.n_pushed = self.n_pushed
        return w

    def components(self):
        return [getattr(self, name) for name, _ in COMPONENTS]

    def encode(self):
        return encode(self)


def push_frame(window, frame):
    return window.copy().push(frame)


def encode(window):
    """Flatten the six components row-major in the fixed COMPONENTS order."""
    return np.concatenate([np.ravel(c) for c in window.components()])


def decode(vec):
    parts = {}
    for (name, shape), sl in zip(COMPONENTS, component_slices()):
        parts[name] = np.asarray(vec[sl]).reshape(shape)
    return parts


# ---------------------------------------------------------------------------
# raw tactile conditioning
# ---------------------------------------------------------------------------

class TactileConditioner:
    """Streaming per-cell running mean plus per-finger effort, thresholded.

    Readings are force magnitudes in [0, 20]. Each finger's effort is added to
    the running mean of every one of its cells; palm cells get no effort.
    """

    def __init__(self, n_cells=N_CELLS, cells_per_link=24, n_fingers=3, window_len=50,
                 threshold=0.8):
        self.n_cells, self.cells_per_link, self.n_fingers = n_cells, cells_per_link, n_fingers
        self.window_len, self.threshold = window_len, threshold
        self._buf = deque(maxlen=window_len)

    def update(self, reading):
        reading = np.asarray(reading, dtype=float)
        if reading.shape != (self.n_cells,):
            raise ValueError(f"expected {self.n_cells} readings, got {reading.shape}")
        if np.any(reading < 0) or np.any(reading > 20):
            raise ValueError("tactile force outside [0, 20]")
        self._buf.append(reading)

    def mean(self):
        return np.sum(np.asarray(self._buf), axis=0) / len(self._buf)

    def effort_per_cell(self, effort):
        per_cell = np.zeros(self.n_cells)
        effort = np.asarray(effort, dtype=float)
        for i in range(self.n_fingers):
            per_cell[i * self.cells_per_link:(i + 1) * self.cells_per_link] = effort[i]
        return per_cell

    def binarize(self, effort):
        return (self.mean() + self.effort_per_cell(effort) > self.threshold).astype(np.int8)


def condition_raw_tactile(stream, effort=None, window_len=50, threshold=0.8, cells_per_link=24,
                          n_fingers=3):
    """Binary contacts from a raw stream of shape (T, 96) and the latest per-finger effort."""
    stream = np.atleast_2d(np.asarray(stream, dtype=float))
    if stream.shape[0] == 0:
        raise ValueError("empty tactile stream")
    cond = TactileConditioner(stream.shape[1], cells_per_link, n_fingers, window_len, threshold)
    for row in stream:
        cond.update(row)
    if effort is None:
        effort = np.zeros(n_fingers)
    return cond.binarize(effort)


def read_replay_csv(path, n_cells=N_CELLS):
    """Replay file with rows (timestamp, cell_id, force) -> (timestamps, readings (T, n_cells)).

    Cells missing at a timestamp hold their previous value (zero initially).
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append((float(rec["timestamp"]), int(rec["cell_id"]), float(rec["force"])))
    stamps = sorted({r[0] for r in rows})
    index = {t: k for k, t in enumerate(stamps)}
    readings = np.full((len(stamps), n_cells), np.nan)
    for t, c, f in rows:
        readings[index[t], c] = f
    last = np.zeros(n_cells)
    for k in range(len(stamps)):
        missing = np.isnan(readings[k])
        readings[k, missing] = last[missing]
        last = readings[k]
    return np.array(stamps), readings


def write_replay_csv(path, stamps, readings):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "cell_id", "force"])
        for t, row in zip(stamps, readings):
            for c, f in enumerate(row):
                w.writerow([repr(float(t)), c, repr(float(f))])
