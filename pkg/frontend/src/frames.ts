/** Frame ordering policy for the preview canvas.
 *
 * The canvas must never go backwards: a frame is shown only if its
 * (epoch, quality) is lexicographically above the currently displayed
 * pair, and never for an epoch newer than the last announced one (such a
 * frame would be a protocol violation). Late frames from superseded
 * epochs are dropped on the floor.
 */

export interface FrameStamp {
  epoch: number
  quality: number
}

export class FrameGate {
  private displayed: FrameStamp | null = null
  private latestAnnounced = -Infinity
  readonly log: FrameStamp[] = []

  announceEpoch(epoch: number): void {
    if (epoch > this.latestAnnounced) this.latestAnnounced = epoch
  }

  get displayedFrame(): FrameStamp | null {
    return this.displayed
  }

  /** True when the frame should be drawn; records it as displayed. */
  offer(frame: FrameStamp): boolean {
    if (frame.epoch > this.latestAnnounced) return false
    if (this.displayed !== null) {
      const d = this.displayed
      const newer = frame.epoch > d.epoch
        || (frame.epoch === d.epoch && frame.quality > d.quality)
      if (!newer) return false
    }
    this.displayed = { ...frame }
    this.log.push({ ...frame })
    return true
  }
}

/** True when the sequence of displayed frames never decreases in
 * (epoch, quality) order; the editor's ordering acceptance check. */
export function isMonotone(frames: readonly FrameStamp[]): boolean {
  for (let i = 1; i < frames.length; i++) {
    const a = frames[i - 1]
    const b = frames[i]
    if (b.epoch < a.epoch) return false
    if (b.epoch === a.epoch && b.quality <= a.quality) return false
  }
  return true
}
