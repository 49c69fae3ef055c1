#!/usr/bin/env python3
"""Build the saldet extension module and drop saldet.so next to this script."""

import shutil
import subprocess
import sys
import sysconfig
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    subprocess.run(
        ["cargo", "build", "-p", "saldet-py", "--release"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libsaldet.so"
    if not built.exists():
        # macOS names cdylibs differently.
        built = ROOT / "target" / "release" / "libsaldet.dylib"
    if not built.exists():
        print("cargo did not produce a saldet cdylib", file=sys.stderr)
        return 1
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    dest = ROOT / "python" / f"saldet{suffix}"
    shutil.copy2(built, dest)
    # Plain .so fallback keeps imports working across minor interpreter bumps.
    plain = ROOT / "python" / "saldet.so"
    if dest != plain:
        shutil.copy2(built, plain)
    print(f"installed {dest.relative_to(ROOT)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
