/** Editor application state: wires the service client, the frame gate,
 * the gesture controller, and the viewport together. Owns no DOM nodes
 * directly; the shell in main.ts passes canvases and controls in. All
 * state here is reconstructible from service responses, so a browser
 * refresh (or a reconnect) resyncs cleanly.
 */

import { ServiceClient, backoffDelays } from './api.js'
import { OrbitState, cameraSpec, orbit, orbitPose, pan, zoom } from './camera.js'
import { FrameGate } from './frames.js'
import { GestureController, GestureMode } from './gestures.js'
import type { GaussianInfo, ServerEvent, Vec3 } from './protocol.js'
import {
  ProjectedGlyph,
  projectGlyphs,
  selectByClick,
  selectInRect,
  toSelectionSpec,
} from './selection.js'

export interface AppHooks {
  onFrame?(png: ArrayBuffer, epoch: number, quality: number): void
  onGlyphs?(glyphs: ProjectedGlyph[], selected: ReadonlySet<number>): void
  onStatus?(text: string): void
  onBanner?(visible: boolean, text?: string): void
  onToast?(text: string): void
  scheduleReconnect?(fn: () => void, delayMs: number): void
}

export class EditorApp {
  readonly gate = new FrameGate()
  readonly gestures: GestureController
  orbitState: OrbitState = {
    target: [0, 0, 0], distance: 3.0, azimuth: 0.6, elevation: 0.4,
  }
  focal = 220
  viewW = 320
  viewH = 320
  glyphs: GaussianInfo[] = []
  selected = new Set<number>()
  epoch: number | null = null
  private subscription: { close(): void } | null = null
  private nextDelay = backoffDelays()

  constructor(private client: ServiceClient,
              private hooks: AppHooks = {}) {
    this.gestures = new GestureController(
      (op, selection, params) => this.client.edit(op, selection, params),
      {
        onRollback: () => this.refreshGlyphs(),
        onToast: (msg) => this.hooks.onToast?.(msg),
      })
  }

  /** Connect: subscribe to events, pull glyph metadata, request a frame. */
  async connect(): Promise<void> {
    try {
      this.subscription = this.client.subscribe(
        (ev) => this.handleEvent(ev),
        () => this.handleDisconnect())
      await this.refreshGlyphs()
      await this.requestFullRender()
      this.nextDelay = backoffDelays()
      this.hooks.onBanner?.(false)
    } catch (err) {
      this.handleDisconnect()
    }
  }

  private handleDisconnect(): void {
    this.subscription?.close()
    this.subscription = null
    const delay = this.nextDelay()
    this.hooks.onBanner?.(true, `service unreachable; retrying in ${
      Math.round(delay / 1000 * 10) / 10}s`)
    const schedule = this.hooks.scheduleReconnect
      ?? ((fn: () => void, ms: number) => setTimeout(fn, ms))
    schedule(() => void this.connect(), delay)
  }

  handleEvent(ev: ServerEvent): void {
    if (ev.event === 'hello') {
      if (ev.payload.epoch !== null) {
        this.epoch = ev.payload.epoch
        this.gate.announceEpoch(ev.payload.epoch)
      }
    } else if (ev.event === 'epochChanged') {
      this.epoch = ev.payload.epoch
      this.gate.announceEpoch(ev.payload.epoch)
      this.gestures.epochChanged()
      void this.refreshGlyphs()
      this.hooks.onStatus?.(`epoch ${ev.payload.epoch}`)
    } else if (ev.event === 'previewFrame') {
      const { epoch, quality, png_base64 } = ev.payload
      if (this.gate.offer({ epoch, quality })) {
        this.hooks.onFrame?.(decodeBase64(png_base64), epoch, quality)
      }
    }
  }

  async refreshGlyphs(): Promise<void> {
    this.glyphs = await this.client.gaussians(
      [-1e6, -1e6, -1e6], [1e6, 1e6, 1e6])
    this.emitGlyphs()
  }

  emitGlyphs(): void {
    const projected = projectGlyphs(
      this.glyphs, orbitPose(this.orbitState), this.focal,
      this.viewW, this.viewH)
    this.hooks.onGlyphs?.(projected, this.selected)
  }

  async requestFullRender(): Promise<void> {
    const spec = cameraSpec(this.orbitState, this.focal, 0.1, 50)
    const result = await this.client.render(
      spec, this.viewW, this.viewH, 'medium')
    this.gate.announceEpoch(result.epoch)
    // A direct render counts as the best quality for its epoch.
    if (this.gate.offer({ epoch: result.epoch,
                          quality: Number.MAX_SAFE_INTEGER })) {
      this.hooks.onFrame?.(result.png, result.epoch,
                           Number.MAX_SAFE_INTEGER)
    }
  }

  // -- viewport interaction -------------------------------------------------

  orbitBy(dAz: number, dEl: number): void {
    this.orbitState = orbit(this.orbitState, dAz, dEl)
    this.emitGlyphs()
  }

  panBy(dx: number, dy: number): void {
    this.orbitState = pan(this.orbitState, dx, dy, this.focal)
    this.emitGlyphs()
  }

  zoomBy(factor: number): void {
    this.orbitState = zoom(this.orbitState, factor)
    this.emitGlyphs()
  }

  marqueeSelect(x0: number, y0: number, x1: number, y1: number): void {
    const projected = projectGlyphs(
      this.glyphs, orbitPose(this.orbitState), this.focal,
      this.viewW, this.viewH)
    this.selected = new Set(selectInRect(projected, { x0, y0, x1, y1 }))
    this.emitGlyphs()
  }

  clickSelect(x: number, y: number): void {
    const projected = projectGlyphs(
      this.glyphs, orbitPose(this.orbitState), this.focal,
      this.viewW, this.viewH)
    this.selected = new Set(selectByClick(projected, x, y))
    this.emitGlyphs()
  }

  // -- gestures ----------------------------------------------------------------

  beginGesture(mode: GestureMode): boolean {
    return this.gestures.begin(mode, toSelectionSpec([...this.selected]))
  }

  dragGesture(delta: { t?: Vec3; angle?: number; factors?: Vec3 }): void {
    this.gestures.update(delta)
  }

  async endGesture(): Promise<boolean> {
    return this.gestures.end()
  }

  async scrub(frame: number): Promise<void> {
    return this.gestures.scrubFrame(frame)
  }
}

export function decodeBase64(data: string): ArrayBuffer {
  const binary = atob(data)
  const bytes = new Uint8Array(binary.length)
  for (let i = 0; i < binary.length; i++) bytes[i] = binary.charCodeAt(i)
  return bytes.buffer
}
