"""
Este arquivo é executado quando chamamos python -m flexmol
"""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
