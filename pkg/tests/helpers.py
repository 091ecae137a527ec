from gpeft import config as C


def small_cfg(**over):
    cfg = C.resolve("desk-small")
    cfg.update(over)
    return cfg
