from __future__ import annotations

import sys

from calibench.cli import main

sys.exit(main())
