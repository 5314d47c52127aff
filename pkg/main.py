#!/usr/bin/env python3
"""
CBSE security-investment toolkit
Cost-based Stackelberg games between an attacker and a defender of a
networked control system.
"""
import sys

from cli import run


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
