/** Edit gesture state machine.
 *
 * Drags accumulate locally (glyphs move on the client); releasing the
 * mouse commits exactly one /edit with the accumulated delta. The gizmo
 * freezes until the resulting epochChanged arrives, so one gesture maps
 * to one epoch increment. A rejected commit (409: another writer won)
 * rolls the local preview back. Deform-frame scrubbing coalesces: at most
 * one /edit is in flight, and a newer slider position supersedes any
 * queued one.
 */

import type { EditOp, SelectionSpec, Vec3 } from './protocol.js'

export type GestureMode = 'translate' | 'rotate' | 'scale'

export interface GestureDelta {
  t?: Vec3
  angle?: number
  axis?: Vec3
  factors?: Vec3
}

export interface EditSender {
  (op: EditOp, selection: SelectionSpec, params: Record<string, unknown>):
    Promise<{ ok: true; newEpoch: number } | { ok: false; status: number }>
}

export interface GestureHooks {
  onLocalPreview?(delta: GestureDelta): void
  onRollback?(): void
  onToast?(message: string): void
  onFrozen?(frozen: boolean): void
}

interface ActiveGesture {
  mode: GestureMode
  selection: SelectionSpec
  translation: Vec3
  angle: number
  axis: Vec3
  factors: Vec3
}

export class GestureController {
  private active: ActiveGesture | null = null
  private frozen = false
  private scrubInFlight = false
  private pendingFrame: number | null = null
  editsSent = 0

  constructor(private send: EditSender,
              private hooks: GestureHooks = {}) {}

  get isFrozen(): boolean {
    return this.frozen
  }

  get inFlight(): boolean {
    return this.active !== null
  }

  begin(mode: GestureMode, selection: SelectionSpec): boolean {
    if (this.active !== null || this.frozen) return false
    this.active = {
      mode, selection,
      translation: [0, 0, 0],
      angle: 0,
      axis: [0, 1, 0],
      factors: [1, 1, 1],
    }
    return true
  }

  /** Accumulate drag motion; previews are local only (no service calls). */
  update(delta: GestureDelta): void {
    const g = this.active
    if (g === null) return
    if (g.mode === 'translate' && delta.t) {
      g.translation = [g.translation[0] + delta.t[0],
                       g.translation[1] + delta.t[1],
                       g.translation[2] + delta.t[2]]
    } else if (g.mode === 'rotate' && delta.angle !== undefined) {
      g.angle += delta.angle
      if (delta.axis) g.axis = delta.axis
    } else if (g.mode === 'scale' && delta.factors) {
      g.factors = [g.factors[0] * delta.factors[0],
                   g.factors[1] * delta.factors[1],
                   g.factors[2] * delta.factors[2]]
    }
    this.hooks.onLocalPreview?.(delta)
  }

  /** Commit: exactly one /edit per gesture, then freeze until the epoch
   * change lands. Zero-delta commits still bump the epoch (the service
   * treats them as ordinary edits). */
  async end(): Promise<boolean> {
    const g = this.active
    if (g === null) return false
    this.active = null
    this.frozen = true
    this.hooks.onFrozen?.(true)
    let result
    if (g.mode === 'translate') {
      result = await this.send('translate', g.selection, { t: g.translation })
    } else if (g.mode === 'rotate') {
      result = await this.send('rotate', g.selection,
                               { angle: g.angle, axis: g.axis })
    } else {
      result = await this.send('scale', g.selection, { factors: g.factors })
    }
    this.editsSent += 1
    if (!result.ok) {
      this.frozen = false
      this.hooks.onFrozen?.(false)
      this.hooks.onRollback?.()
      this.hooks.onToast?.(
        result.status === 409
          ? 'edit rejected: another writer is active'
          : `edit failed (${result.status})`)
      return false
    }
    return true
  }

  /** Unfreezes the gizmo; call on every epochChanged event. */
  epochChanged(): void {
    if (this.frozen) {
      this.frozen = false
      this.hooks.onFrozen?.(false)
    }
  }

  /** Deform scrub with trailing-edge coalescing. */
  async scrubFrame(frame: number): Promise<void> {
    this.pendingFrame = frame
    if (this.scrubInFlight) return
    this.scrubInFlight = true
    try {
      while (this.pendingFrame !== null) {
        const next = this.pendingFrame
        this.pendingFrame = null
        const result = await this.send('deform_frame', 'all', { frame: next })
        this.editsSent += 1
        if (!result.ok) {
          this.hooks.onToast?.(`deform failed (${result.status})`)
          return
        }
      }
    } finally {
      this.scrubInFlight = false
    }
  }
}
