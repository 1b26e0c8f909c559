# ---------------------------------------------------
# progress.py - Progress Class
# ---------------------------------------------------
# A class that displays a progress bar with status
# text for long training loops. Training functions
# call it with the keyword messages left, center and
# right plus a completion value in [0, 1]; the bar is
# rendered on stderr with tqdm.
# ---------------------------------------------------

from tqdm import tqdm


class Progress:

    # Resolution of the bar; values in [0, 1] are scaled to it
    TOTAL = 1000

    def __init__(self, *, disable=False):
        """
        Terminal progress bar with a status message. Instances are
        callable so they can be handed to the trainer directly as
        its progress callback.
        """
        self._disable = disable
        self._bar = None

    def _ensure_bar(self):
        if self._bar is None:
            self._bar = tqdm(total=self.TOTAL, disable=self._disable, leave=False,
                             bar_format="{l_bar}{bar}| {postfix}")
        return self._bar

    def update_progress(self, *, left="", center="", right="", value=0):
        """ Updates the message and progress value of the bar. """
        bar = self._ensure_bar()
        description = f"{left} [{center.upper()}]" if center else left
        bar.set_description_str(description, refresh=False)
        bar.set_postfix_str(right, refresh=False)
        position = int(round(min(max(value, 0.0), 1.0) * self.TOTAL))
        bar.update(position - bar.n)

        # Finished bars are closed so the next stage starts on a new line
        if value >= 1:
            self.close()

    __call__ = update_progress

    def close(self):
        if self._bar is not None:
            self._bar.close()
            self._bar = None
