from stepconf.cli import main

raise SystemExit(main())
