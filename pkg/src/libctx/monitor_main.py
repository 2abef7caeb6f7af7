"""Entry point of the in-process monitor child.

The application spawns ``python -m libctx.monitor_main`` with the control
pipe ends inherited, grants it attach rights, and waits for the readiness
byte.  The main thread seizes the application and runs the trace event
loop; a control thread serves the configuration channel.
"""

from __future__ import annotations

import argparse
import os
import sys

from .control import FAILED_BYTE, READY_BYTE, ControlServer, apply_request
from .log import get_logger
from .monitor import Monitor

logger = get_logger("libctx.monitor_main")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="libctx-monitor")
    parser.add_argument("--app-pid", type=int, required=True)
    parser.add_argument("--ctrl-read", type=int, required=True)
    parser.add_argument("--ctrl-write", type=int, required=True)
    parser.add_argument("--ready-write", type=int, required=True)
    parser.add_argument("--forge-root", default=None)
    args = parser.parse_args(argv)

    monitor = Monitor(forge_root=args.forge_root)
    try:
        monitor.attach_to_process(args.app_pid)
    except Exception as exc:  # noqa: BLE001 - report attach failure to the app
        try:
            os.write(args.ready_write, FAILED_BYTE + str(exc).encode()[:400])
        except OSError:
            pass
        logger.error("attach failed: %s", exc)
        return 1

    server = ControlServer(
        args.ctrl_read, args.ctrl_write, lambda req: apply_request(monitor, req)
    )
    server.start_thread()

    os.write(args.ready_write, READY_BYTE)
    os.close(args.ready_write)

    try:
        monitor.run()
    finally:
        monitor.forge.cleanup()
    logger.debug("application %d exited; monitor terminating", args.app_pid)
    return 0


if __name__ == "__main__":
    sys.exit(main())
