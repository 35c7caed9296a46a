class NullObject:
    """Accepts any attribute access or call and does nothing.

    Used as the default logger for workers built without one.
    """

    def __getattr__(self, name):
        return self

    def __call__(self, *args, **kwargs):
        return self

    def __bool__(self):
        return False
