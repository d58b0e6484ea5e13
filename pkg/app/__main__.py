"""`python -m app` 入口"""

import sys

from app.main import main

sys.exit(main())
