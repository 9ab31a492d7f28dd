# hierflow
# This module is a helper module that provides multiple generic functions that can be used all over hierflow.
# These functions are not component specific: the binary container used for checkpoints and corpus features,
# CSV export, seed derivation and the worker cap.

import os
import struct

import numpy as np
import pandas as pd
import psutil

from lib.class_helper import CorpusError, ValidationError

CONTAINER_MAGIC = b"HFLW"
CONTAINER_VERSION = 1
THREADS_ENV_VAR = "HIERFLOW_THREADS"


def write_container(path, entries):
    """Writes named arrays to the little-endian binary container.

    Layout: 4 byte magic, 1 byte version, uint32 entry count, then per entry: uint16 name length, name (utf-8),
    uint8 ndim, ndim x uint32 extents, uint64 payload length in bytes, float64 payload.

    Args:
        path (str): The target file
        entries (dict): Mapping of name to array (stored as float64)

    Returns:
        None
    """
    try:
        with open(path, "wb") as f:
            f.write(CONTAINER_MAGIC)
            f.write(struct.pack("<B", CONTAINER_VERSION))
            f.write(struct.pack("<I", len(entries)))
            for name, value in entries.items():
                array = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
                encoded = name.encode("utf-8")
                payload = array.tobytes()
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", array.ndim))
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
                f.write(struct.pack("<Q", len(payload)))
                f.write(payload)
    except OSError as e:
        raise CorpusError(f"Could not write container {path}: {e}") from e


def read_container(path):
    """Reads a binary container written by write_container().

    Args:
        path (str): The file to read

    Returns:
        dict: Mapping of name to float64 array, in file order
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorpusError(f"Could not read container {path}: {e}") from e

    if data[:4] != CONTAINER_MAGIC:
        raise ValidationError(f"{path} is not a hierflow container (bad magic)")
    version = data[4]
    if version != CONTAINER_VERSION:
        raise ValidationError(f"{path} has unsupported container version {version}")

    (count,) = struct.unpack_from("<I", data, 5)
    offset = 9
    entries = {}
    for _ in range(count):
        (name_length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_length].decode("utf-8")
        offset += name_length
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        (length,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if offset + length > len(data):
            raise ValidationError(f"{path} is truncated in entry '{name}'")
        entries[name] = np.frombuffer(data, dtype="<f8", count=length // 8, offset=offset).reshape(shape).copy()
        offset += length
    return entries


def write_csv(path, rows, columns=None, append=False):
    """Writes rows (list of dicts or a 2-D array) to a CSV file with a header row.

    Args:
        path (str): The target file
        rows (list | np.ndarray): The rows
        columns (list): The column order (required for arrays)
        append (bool): Append to an existing file without writing the header again

    Returns:
        None
    """
    frame = pd.DataFrame(rows, columns=columns)
    write_header = not (append and os.path.exists(path))
    try:
        frame.to_csv(path, mode="a" if append else "w", header=write_header, index=False, float_format="%.10g")
    except OSError as e:
        raise CorpusError(f"Could not write CSV {path}: {e}") from e


def read_csv(path):
    """Reads a CSV file written by write_csv() into a pandas DataFrame."""
    if not os.path.isfile(path):
        raise CorpusError(f"CSV file {path} does not exist")
    return pd.read_csv(path)


def ensure_dir(path):
    """Creates a directory (and parents) if needed, raising CorpusError if that is impossible."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"Could not create directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise CorpusError(f"Directory {path} is not writable")
    return path


def derive_seed(seed, *indices):
    """Derives an independent integer seed from a base seed and indices (e.g. the sample index)."""
    sequence = np.random.SeedSequence([int(seed)] + [int(i) for i in indices])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def worker_cap():
    """Returns the number of workers allowed, read from HIERFLOW_THREADS (default: physical CPU count)."""
    value = os.environ.get(THREADS_ENV_VAR)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ValidationError(f"{THREADS_ENV_VAR} has to be an integer, got '{value}'")
    return max(1, psutil.cpu_count(logical=False) or 1)


def dedup(values):
    """Removes duplicates from a list while keeping the first occurrence order."""
    seen = set()
    result = []
    for value in values:
        if value not in seen:
            seen.add(value)
            result.append(value)
    return result
