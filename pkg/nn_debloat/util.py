import contextlib
import os
import tempfile


def atomic_write(path, data):
    """
    Write `data` (bytes) to `path` through a temporary file in the same
    directory followed by an atomic rename.

    A failure leaves any existing file at `path` untouched.

    :param path: destination path
    :param data: bytes to write
    :return: number of bytes written
    """
    directory = os.path.dirname(os.path.abspath(path))
    handle, temp_path = tempfile.mkstemp(
        prefix=".tmp-", suffix=os.path.basename(path), dir=directory
    )
    try:
        with os.fdopen(handle, "wb") as temp_file:
            temp_file.write(data)
        os.replace(temp_path, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(temp_path)
        raise
    return len(data)
