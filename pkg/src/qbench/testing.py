"""A local executor that simulates privileged host tools.

Tuning and counter collection need root and real NICs.  ``SimulatedExecutor``
answers ``sysctl``, ``ethtool`` and ``netstat`` from an in-memory host state
and runs every other command locally, so full measurements (and their
failure paths) can be exercised in unprivileged test environments.
"""

from __future__ import annotations

import re
import shlex
from typing import Optional

from .executor import CommandResult, LocalExecutor
from .tuning import DEFAULT_RCVBUF_BYTES, OFFLOAD_FEATURES

SIMULATED_TOOLS = frozenset({"sysctl", "ethtool", "netstat"})

DEFAULT_SYSCTLS = {
    "net.core.rmem_max": str(DEFAULT_RCVBUF_BYTES),
    "net.core.rmem_default": str(DEFAULT_RCVBUF_BYTES),
    "net.core.wmem_max": str(DEFAULT_RCVBUF_BYTES),
    "net.core.wmem_default": str(DEFAULT_RCVBUF_BYTES),
    "net.ipv4.udp_mem": "190566\t254089\t381132",
}

_FEATURE_NAMES = {v: k for k, v in OFFLOAD_FEATURES.items()}


class SimulatedExecutor(LocalExecutor):
    """Local executor with a fake kernel configuration and NIC.

    ``deny_writes`` holds setting names (sysctl keys or offload flags) whose
    writes fail with "Operation not permitted"; ``fail_commands`` holds
    regexes of commands that exit 1.  ``ignore_writes`` accepts writes but
    leaves the value unchanged, so read-back fails.
    """

    def __init__(self, host: str = "sim", interfaces=("eth0",), sysctls: Optional[dict] = None):
        super().__init__(host)
        self.sysctls = dict(DEFAULT_SYSCTLS if sysctls is None else sysctls)
        self.offloads = {i: {f: "on" for f in OFFLOAD_FEATURES.values()} for i in interfaces}
        self.counters = {"rx_packets": 1000, "rx_dropped": 3, "rx_missed_errors": 0,
                         "Udp.packets-received": 5000, "Udp.receive-buffer-errors": 11}
        self.counter_step = {"rx_packets": 700, "rx_dropped": 1,
                             "Udp.packets-received": 690, "Udp.receive-buffer-errors": 2}
        self.deny_writes = set()
        self.ignore_writes = set()
        self.fail_commands = []
        self.log = []

    # -- state -------------------------------------------------------------

    def snapshot(self) -> dict:
        """Every setting as it would be probed, for round-trip checks."""
        state = dict(self.sysctls)
        for iface, feats in self.offloads.items():
            for feat, value in feats.items():
                state[f"offload:{iface}:{_FEATURE_NAMES[feat]}"] = value
        return state

    @property
    def writes(self) -> list:
        return [c for c in self.log if c.startswith(("sysctl -w", "ethtool -K"))]

    # -- dispatch ----------------------------------------------------------

    def run(self, command, env=None, timeout=None):
        self.log.append(command)
        for pattern in self.fail_commands:
            if re.search(pattern, command):
                return CommandResult(command, 1, "", f"simulated failure: {command}\n")
        try:
            argv = shlex.split(command)
        except ValueError:
            argv = []
        handler = self._handler(argv)
        if handler is None:
            return super().run(command, env, timeout)
        return handler(command, argv)

    def _handler(self, argv):
        if not argv:
            return None
        if argv[0] == "sysctl":
            return self._sysctl
        if argv[0] == "ethtool" and len(argv) >= 3:
            return {"-k": self._ethtool_k, "-K": self._ethtool_K, "-S": self._ethtool_S}.get(argv[1])
        if argv[0] == "netstat" and argv[1:] == ["-su"]:
            return self._netstat
        if argv[:2] == ["test", "-e"] and len(argv) == 3 and argv[2].startswith("/sys/class/net/"):
            return self._iface_exists
        if argv[:2] == ["command", "-v"] and len(argv) >= 3 and argv[2] in SIMULATED_TOOLS:
            return lambda c, a: CommandResult(c, 0, f"/usr/sbin/{a[2]}\n")
        return None

    def _sysctl(self, command, argv):
        if len(argv) == 3 and argv[1] == "-n":
            key = argv[2]
            if key not in self.sysctls:
                return CommandResult(command, 255, "", f"sysctl: cannot stat /proc/sys/{key.replace('.', '/')}: No such file or directory\n")
            return CommandResult(command, 0, self.sysctls[key] + "\n")
        if len(argv) == 3 and argv[1] == "-w" and "=" in argv[2]:
            key, _, value = argv[2].partition("=")
            if key not in self.sysctls:
                return CommandResult(command, 255, "", f"sysctl: cannot stat /proc/sys/{key}\n")
            if key in self.deny_writes:
                return CommandResult(command, 255, "", f"sysctl: permission denied on key \"{key}\"\n")
            if key not in self.ignore_writes:
                self.sysctls[key] = value
            return CommandResult(command, 0, f"{key} = {value}\n")
        return CommandResult(command, 1, "", "sysctl: usage\n")

    def _no_device(self, command, iface):
        return CommandResult(command, 1, "", f"netlink error: no device matches name ({iface})\n")

    def _ethtool_k(self, command, argv):
        iface = argv[2]
        if iface not in self.offloads:
            return self._no_device(command, iface)
        lines = [f"Features for {iface}:", "rx-checksumming: on", "tx-checksumming: on"]
        lines += [f"{feat}: {value}" for feat, value in sorted(self.offloads[iface].items())]
        lines.append("large-receive-offload: off [fixed]")
        return CommandResult(command, 0, "\n".join(lines) + "\n")

    def _ethtool_K(self, command, argv):
        iface = argv[2]
        if iface not in self.offloads:
            return self._no_device(command, iface)
        pairs = argv[3:]
        if len(pairs) % 2 or not pairs:
            return CommandResult(command, 1, "", "ethtool: bad command line\n")
        for flag, state in zip(pairs[::2], pairs[1::2]):
            if flag not in OFFLOAD_FEATURES or state not in ("on", "off"):
                return CommandResult(command, 1, "", f"ethtool: bad feature {flag}\n")
            if flag in self.deny_writes:
                return CommandResult(command, 1, "", "Cannot set device feature settings: Operation not permitted\n")
            if flag not in self.ignore_writes:
                self.offloads[iface][OFFLOAD_FEATURES[flag]] = state
        return CommandResult(command, 0)

    def _advance(self) -> None:
        for k, step in self.counter_step.items():
            self.counters[k] += step

    def _ethtool_S(self, command, argv):
        iface = argv[2]
        if iface not in self.offloads:
            return self._no_device(command, iface)
        self._advance()
        keys = ("rx_packets", "rx_dropped", "rx_missed_errors")
        text = "NIC statistics:\n" + "".join(f"     {k}: {self.counters[k]}\n" for k in keys)
        return CommandResult(command, 0, text)

    def _netstat(self, command, argv):
        self._advance()
        c = self.counters
        text = (
            "IcmpMsg:\n    InType3: 4\n"
            "Udp:\n"
            f"    {c['Udp.packets-received']} packets received\n"
            "    0 packets to unknown port received\n"
            f"    {c['Udp.receive-buffer-errors']} packet receive errors\n"
            "    812 packets sent\n"
            f"    {c['Udp.receive-buffer-errors']} receive buffer errors\n"
            "    0 send buffer errors\n"
            "UdpLite:\n"
        )
        return CommandResult(command, 0, text)

    def _iface_exists(self, command, argv):
        iface = argv[2].rsplit("/", 1)[-1]
        return CommandResult(command, 0 if iface in self.offloads else 1)
