"""Child side of the sandbox wire protocol.

Reads one framed request from stdin, runs the candidate program's entry
function on every case, and writes one framed response to the original
stdout. Frames are ``CMEM-FRAME <n>\\n`` followed by ``n`` bytes of UTF-8
JSON and a trailing newline. See docs/sandbox-protocol.md.
"""

import copy
import io
import json
import os
import sys
import traceback

PROTOCOL = 1
HEADER = "CMEM-FRAME "


def read_frame(stream):
    header = stream.readline()
    if not header.startswith(HEADER.encode()):
        raise ValueError("missing frame header")
    size = int(header[len(HEADER):].strip())
    body = stream.read(size)
    if len(body) != size:
        raise ValueError("truncated frame")
    return json.loads(body.decode("utf-8"))


def write_frame(fd, payload):
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    data = HEADER.encode() + str(len(body)).encode() + b"\n" + body + b"\n"
    while data:
        written = os.write(fd, data)
        data = data[written:]


def to_plain(value):
    if hasattr(value, "tolist"):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if hasattr(value, "item"):
        return to_plain(value.item())
    raise TypeError("unsupported value of type %s" % type(value).__name__)


def short_error(exc):
    lines = traceback.format_exception_only(type(exc), exc)
    return "".join(lines).strip()[:2000]


def run_cases(request):
    cases = request.get("cases", [])
    entry_name = request.get("entry_name", "transform")
    namespace = {"__name__": "candidate", "__builtins__": __builtins__}
    try:
        code = compile(request.get("program", ""), "<candidate>", "exec")
    except BaseException as exc:  # noqa: BLE001
        message = "compile error: " + short_error(exc)
        return [{"status": "error", "error": message} for _ in cases]
    try:
        exec(code, namespace)
    except BaseException as exc:  # noqa: BLE001
        message = "error while loading program: " + short_error(exc)
        return [{"status": "error", "error": message} for _ in cases]
    entry = namespace.get(entry_name)
    if not callable(entry):
        return [{"status": "error", "error": "entry not found: " + entry_name} for _ in cases]
    results = []
    for grid in cases:
        try:
            output = entry(copy.deepcopy(grid))
        except BaseException as exc:  # noqa: BLE001
            results.append({"status": "error", "error": short_error(exc)})
            continue
        try:
            results.append({"status": "ok", "grid": to_plain(output)})
        except Exception as exc:  # noqa: BLE001
            results.append({"status": "invalid", "error": short_error(exc)})
    return results


def main():
    out_fd = os.dup(1)
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    sys.stdout = io.StringIO()
    try:
        request = read_frame(sys.stdin.buffer)
    except Exception as exc:  # noqa: BLE001
        write_frame(out_fd, {"protocol": PROTOCOL, "fatal": "bad request: " + short_error(exc)})
        return 3
    if "echo" in request:
        version = "Python %d.%d.%d" % sys.version_info[:3]
        write_frame(out_fd, {"protocol": PROTOCOL, "echo": request["echo"], "interpreter": version})
        return 0
    per_case = run_cases(request)
    write_frame(out_fd, {"protocol": PROTOCOL, "per_case": per_case})
    return 0


if __name__ == "__main__":
    sys.exit(main())
